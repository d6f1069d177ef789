//! NDN-style Interest/Data TLV codec.
//!
//! Type and length fields use the NDN variable-length number encoding.
//! Name components are plain byte TLVs; there is no type registry beyond the
//! handful of types listed in [`tlv`].

use std::fmt;

use super::CodecError;

pub mod tlv {
    pub const INTEREST: u64 = 0x05;
    pub const DATA: u64 = 0x06;
    pub const NAME: u64 = 0x07;
    pub const COMPONENT: u64 = 0x08;
    pub const NONCE: u64 = 0x0A;
    pub const INTEREST_LIFETIME: u64 = 0x0C;
    pub const META_INFO: u64 = 0x14;
    pub const CONTENT: u64 = 0x15;
    pub const SIGNATURE_INFO: u64 = 0x16;
    pub const SIGNATURE_VALUE: u64 = 0x17;
    pub const CONTENT_TYPE: u64 = 0x18;
    pub const FRESHNESS_PERIOD: u64 = 0x19;
    pub const FINAL_BLOCK_ID: u64 = 0x1A;
    pub const SIGNATURE_TYPE: u64 = 0x1B;
    pub const KEY_DIGEST: u64 = 0x1D;
    pub const AEAD_TAG: u64 = 0x81;
}

/// Signature type announced for HMAC-SHA-256 envelopes.
pub const SIGNATURE_HMAC_SHA256: u8 = 4;
pub const FRESHNESS_MS: u32 = 10_000;
pub const MAC_LEN: usize = 8;
pub const SIGNATURE_LEN: usize = 32;

#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Name(pub Vec<Vec<u8>>);

impl Name {
    pub fn components(&self) -> &[Vec<u8>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, component: impl Into<Vec<u8>>) {
        self.0.push(component.into());
    }

    pub fn with(mut self, component: impl Into<Vec<u8>>) -> Self {
        self.push(component);
        self
    }

    pub fn has_prefix(&self, prefix: &Name) -> bool {
        prefix.0.len() <= self.0.len() && self.0[..prefix.0.len()] == prefix.0[..]
    }

    /// Full Name TLV.
    pub fn to_tlv(&self) -> Vec<u8> {
        let mut inner = Vec::new();
        for c in &self.0 {
            put_tlv(&mut inner, tlv::COMPONENT, c);
        }
        let mut out = Vec::with_capacity(inner.len() + 2);
        put_tlv(&mut out, tlv::NAME, &inner);
        out
    }
}

impl std::str::FromStr for Name {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Name(
            s.split('/')
                .filter(|c| !c.is_empty())
                .map(|c| c.as_bytes().to_vec())
                .collect(),
        ))
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("/");
        }
        for c in &self.0 {
            f.write_str("/")?;
            if c.iter().all(|b| b.is_ascii_graphic() && *b != b'/' && *b != b'%') {
                f.write_str(std::str::from_utf8(c).expect("ascii"))?;
            } else {
                for b in c {
                    write!(f, "%{b:02X}")?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Name({self})")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Interest {
    pub name: Name,
    pub nonce: u32,
    pub lifetime_ms: u16,
}

/// Security TLVs attached to a protected Data packet.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DataSecurity {
    pub key_id: u8,
    pub mac: [u8; MAC_LEN],
    pub signature: [u8; SIGNATURE_LEN],
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Data {
    pub name: Name,
    pub payload: Vec<u8>,
    pub security: Option<DataSecurity>,
}

/// Interests never carry security fields; only Data can.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NdnPacket {
    Interest(Interest),
    Data(Data),
}

impl NdnPacket {
    pub fn name(&self) -> &Name {
        match self {
            NdnPacket::Interest(i) => &i.name,
            NdnPacket::Data(d) => &d.name,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_ndn(self)
    }
}

pub fn varnum_len(n: u64) -> usize {
    match n {
        0..=252 => 1,
        253..=0xFFFF => 3,
        0x1_0000..=0xFFFF_FFFF => 5,
        _ => 9,
    }
}

pub fn put_varnum(out: &mut Vec<u8>, n: u64) {
    match n {
        0..=252 => out.push(n as u8),
        253..=0xFFFF => {
            out.push(0xFD);
            out.extend_from_slice(&(n as u16).to_be_bytes());
        }
        0x1_0000..=0xFFFF_FFFF => {
            out.push(0xFE);
            out.extend_from_slice(&(n as u32).to_be_bytes());
        }
        _ => {
            out.push(0xFF);
            out.extend_from_slice(&n.to_be_bytes());
        }
    }
}

pub fn put_tlv(out: &mut Vec<u8>, ty: u64, value: &[u8]) {
    put_varnum(out, ty);
    put_varnum(out, value.len() as u64);
    out.extend_from_slice(value);
}

/// Size of the type and length fields for a TLV carrying `value_len` bytes.
pub fn tlv_header_len(ty: u64, value_len: usize) -> usize {
    varnum_len(ty) + varnum_len(value_len as u64)
}

fn meta_info() -> Vec<u8> {
    let mut inner = Vec::with_capacity(17);
    put_tlv(&mut inner, tlv::CONTENT_TYPE, &[0]);
    put_tlv(&mut inner, tlv::FRESHNESS_PERIOD, &FRESHNESS_MS.to_be_bytes());
    let mut final_block = Vec::with_capacity(6);
    put_tlv(&mut final_block, tlv::COMPONENT, &0u32.to_be_bytes());
    put_tlv(&mut inner, tlv::FINAL_BLOCK_ID, &final_block);
    let mut out = Vec::with_capacity(19);
    put_tlv(&mut out, tlv::META_INFO, &inner);
    out
}

fn signature_info(key_id: u8) -> Vec<u8> {
    let mut inner = Vec::with_capacity(6);
    put_tlv(&mut inner, tlv::SIGNATURE_TYPE, &[SIGNATURE_HMAC_SHA256]);
    put_tlv(&mut inner, tlv::KEY_DIGEST, &[key_id]);
    let mut out = Vec::with_capacity(8);
    put_tlv(&mut out, tlv::SIGNATURE_INFO, &inner);
    out
}

/// Inner Data TLVs covered by the HMAC envelope: everything except the
/// SignatureValue. The MAC and key id are taken from `security`; the
/// signature bytes are ignored.
pub fn signed_portion(data: &Data) -> Vec<u8> {
    let mut inner = data.name.to_tlv();
    inner.extend_from_slice(&meta_info());
    put_tlv(&mut inner, tlv::CONTENT, &data.payload);
    if let Some(sec) = &data.security {
        inner.extend_from_slice(&signature_info(sec.key_id));
        put_tlv(&mut inner, tlv::AEAD_TAG, &sec.mac);
    }
    inner
}

pub fn encode_ndn(pkt: &NdnPacket) -> Vec<u8> {
    let mut out = Vec::new();
    match pkt {
        NdnPacket::Interest(i) => {
            let mut inner = i.name.to_tlv();
            put_tlv(&mut inner, tlv::NONCE, &i.nonce.to_be_bytes());
            put_tlv(&mut inner, tlv::INTEREST_LIFETIME, &i.lifetime_ms.to_be_bytes());
            put_tlv(&mut out, tlv::INTEREST, &inner);
        }
        NdnPacket::Data(d) => {
            let mut inner = signed_portion(d);
            if let Some(sec) = &d.security {
                put_tlv(&mut inner, tlv::SIGNATURE_VALUE, &sec.signature);
            }
            put_tlv(&mut out, tlv::DATA, &inner);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn varnum(&mut self, what: &'static str) -> Result<u64, CodecError> {
        let first = *self.buf.get(self.pos).ok_or(CodecError::Truncated { field: what })?;
        self.pos += 1;
        let width = match first {
            0xFD => 2,
            0xFE => 4,
            0xFF => 8,
            b => return Ok(b as u64),
        };
        let bytes = self
            .buf
            .get(self.pos..self.pos + width)
            .ok_or(CodecError::Truncated { field: what })?;
        self.pos += width;
        Ok(bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64))
    }

    /// Reads one TLV whose value must lie within the current buffer.
    fn tlv(&mut self) -> Result<(u64, &'a [u8]), CodecError> {
        let ty = self.varnum("tlv type")?;
        let len = self.varnum("tlv length")?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if len > remaining {
            return Err(CodecError::TlvLengthOverflow {
                tlv_type: ty,
                declared: len,
                available: remaining as usize,
            });
        }
        let value = &self.buf[self.pos..self.pos + len as usize];
        self.pos += len as usize;
        Ok((ty, value))
    }

    fn expect(&mut self, ty: u64) -> Result<&'a [u8], CodecError> {
        let (got, value) = self.tlv()?;
        if got != ty {
            return Err(CodecError::UnexpectedTlv {
                expected: ty,
                found: got,
            });
        }
        Ok(value)
    }

    fn peek_type(&self) -> Option<u64> {
        let mut probe = Reader {
            buf: self.buf,
            pos: self.pos,
        };
        probe.varnum("tlv type").ok()
    }
}

fn decode_name(value: &[u8]) -> Result<Name, CodecError> {
    let mut r = Reader::new(value);
    let mut comps = Vec::new();
    while !r.at_end() {
        comps.push(r.expect(tlv::COMPONENT)?.to_vec());
    }
    Ok(Name(comps))
}

fn fixed<const N: usize>(value: &[u8], field: &'static str) -> Result<[u8; N], CodecError> {
    value.try_into().map_err(|_| CodecError::BadFieldLength {
        field,
        len: value.len(),
    })
}

pub fn decode_ndn(bytes: &[u8]) -> Result<NdnPacket, CodecError> {
    let mut outer = Reader::new(bytes);
    let (ty, value) = outer.tlv()?;
    if !outer.at_end() {
        return Err(CodecError::TrailingBytes(bytes.len() - outer.pos));
    }
    let mut r = Reader::new(value);
    match ty {
        tlv::INTEREST => {
            let name = decode_name(r.expect(tlv::NAME)?)?;
            let nonce = u32::from_be_bytes(fixed(r.expect(tlv::NONCE)?, "nonce")?);
            let lifetime_ms = u16::from_be_bytes(fixed(r.expect(tlv::INTEREST_LIFETIME)?, "lifetime")?);
            if !r.at_end() {
                return Err(CodecError::TrailingBytes(value.len() - r.pos));
            }
            Ok(NdnPacket::Interest(Interest {
                name,
                nonce,
                lifetime_ms,
            }))
        }
        tlv::DATA => {
            let name = decode_name(r.expect(tlv::NAME)?)?;
            // MetaInfo content is fixed by the encoder and not retained.
            let mut meta = Reader::new(r.expect(tlv::META_INFO)?);
            while !meta.at_end() {
                meta.tlv()?;
            }
            let payload = r.expect(tlv::CONTENT)?.to_vec();
            let security = if r.peek_type() == Some(tlv::SIGNATURE_INFO) {
                let mut info = Reader::new(r.expect(tlv::SIGNATURE_INFO)?);
                let sig_type = info.expect(tlv::SIGNATURE_TYPE)?;
                if sig_type != [SIGNATURE_HMAC_SHA256] {
                    return Err(CodecError::BadFieldLength {
                        field: "signature type",
                        len: sig_type.len(),
                    });
                }
                let [key_id] = fixed::<1>(info.expect(tlv::KEY_DIGEST)?, "key id")?;
                let mac = fixed(r.expect(tlv::AEAD_TAG)?, "aead tag")?;
                let signature = fixed(r.expect(tlv::SIGNATURE_VALUE)?, "signature")?;
                Some(DataSecurity { key_id, mac, signature })
            } else {
                None
            };
            if !r.at_end() {
                return Err(CodecError::TrailingBytes(value.len() - r.pos));
            }
            Ok(NdnPacket::Data(Data {
                name,
                payload,
                security,
            }))
        }
        other => Err(CodecError::UnexpectedTlv {
            expected: tlv::DATA,
            found: other,
        }),
    }
}
