//! IEEE 802.15.4 framing and 6LoWPAN-style adaptation with byte-exact size
//! accounting.
//!
//! Every frame carries a 23-byte MAC overhead: 2 frame control, 1 sequence
//! number, 2 PAN id, 8+8 extended addresses and a 2-byte FCS. That leaves
//! 104 bytes of the 127-byte PHY limit for the adaptation layer.
//!
//! IP-based stacks use a 41-byte adaptation header: three dispatch bytes,
//! two inline IPv6 addresses and a 6-byte compressed UDP header. Datagrams
//! that exceed the 104-byte budget are split into exactly two fragments with
//! a 4-byte first-fragment and a 5-byte subsequent-fragment header. The
//! fragment offset is carried in bytes rather than 8-octet units.

use std::collections::BTreeMap;

use crc::{Crc, CRC_16_KERMIT};

pub const MAX_FRAME_LEN: usize = 127;
pub const MAC_HEADER_LEN: usize = 23;
pub const FRAME_BUDGET: usize = MAX_FRAME_LEN - MAC_HEADER_LEN;
pub const SIXLOWPAN_HEADER_LEN: usize = 35;
pub const UDP_HEADER_LEN: usize = 6;
pub const SIXLOWPAN_UDP_COST: usize = SIXLOWPAN_HEADER_LEN + UDP_HEADER_LEN;
pub const FRAG1_HEADER_LEN: usize = 4;
pub const FRAGN_HEADER_LEN: usize = 5;
/// Largest datagram that fits in two fragments.
pub const MAX_DATAGRAM_LEN: usize = 2 * FRAME_BUDGET - FRAG1_HEADER_LEN - FRAGN_HEADER_LEN;

const FRAME_CONTROL: [u8; 2] = [0x41, 0xCC];
const FCS: Crc<u16> = Crc::<u16>::new(&CRC_16_KERMIT);
const IPHC: [u8; 3] = [0x7B, 0x00, 0x11];
const FRAG1_DISPATCH: u8 = 0xC0;
const FRAGN_DISPATCH: u8 = 0xE0;
const NDN_FACE_DISPATCH: u8 = 0x3F;
const FIRST_FRAGMENT_DATA: usize = FRAME_BUDGET - FRAG1_HEADER_LEN;

pub type NodeAddr = u16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LowpanError {
    #[error("datagram of {len} bytes needs more than two fragments (max {MAX_DATAGRAM_LEN})")]
    DatagramTooLarge { len: usize },
    #[error("frame of {0} bytes exceeds 127")]
    FrameTooLong(usize),
    #[error("frame of {0} bytes is shorter than the MAC header")]
    FrameTruncated(usize),
    #[error("frame check sequence mismatch")]
    BadFcs,
    #[error("unsupported frame control field")]
    BadFrameControl,
    #[error("unexpected dispatch byte {0:#04x}")]
    BadDispatch(u8),
    #[error("adaptation header truncated")]
    HeaderTruncated,
    #[error("UDP checksum mismatch")]
    BadChecksum,
    #[error("fragment missing from datagram")]
    MissingFragment,
    #[error("fragments belong to different datagrams")]
    FragmentMismatch,
    #[error("no frames")]
    NoFrames,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct MacHeader {
    pub seq: u8,
    pub pan: u16,
    pub dst: u64,
    pub src: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FragmentInfo {
    pub index: u8,
    pub datagram_size: u16,
    pub tag: u16,
    pub offset: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub mac: MacHeader,
    /// Adaptation payload, including any fragmentation header.
    pub payload: Vec<u8>,
}

impl Frame {
    /// Size on air, MAC header and FCS included.
    pub fn len(&self) -> usize {
        MAC_HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fragment(&self) -> Option<FragmentInfo> {
        let p = &self.payload;
        let size = |p: &[u8]| u16::from_be_bytes([p[0] & 0x07, p[1]]);
        match p.first()? & 0xF8 {
            FRAG1_DISPATCH if p.len() >= FRAG1_HEADER_LEN => Some(FragmentInfo {
                index: 0,
                datagram_size: size(p),
                tag: u16::from_be_bytes([p[2], p[3]]),
                offset: 0,
            }),
            FRAGN_DISPATCH if p.len() >= FRAGN_HEADER_LEN => Some(FragmentInfo {
                index: 1,
                datagram_size: size(p),
                tag: u16::from_be_bytes([p[2], p[3]]),
                offset: p[4],
            }),
            _ => None,
        }
    }

    pub fn is_fragment(&self) -> bool {
        self.fragment().is_some()
    }

    pub fn fragment_index(&self) -> Option<u8> {
        self.fragment().map(|f| f.index)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&FRAME_CONTROL);
        out.push(self.mac.seq);
        out.extend_from_slice(&self.mac.pan.to_le_bytes());
        out.extend_from_slice(&self.mac.dst.to_le_bytes());
        out.extend_from_slice(&self.mac.src.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let fcs = FCS.checksum(&out);
        out.extend_from_slice(&fcs.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, LowpanError> {
        if bytes.len() > MAX_FRAME_LEN {
            return Err(LowpanError::FrameTooLong(bytes.len()));
        }
        if bytes.len() < MAC_HEADER_LEN {
            return Err(LowpanError::FrameTruncated(bytes.len()));
        }
        let (body, fcs) = bytes.split_at(bytes.len() - 2);
        if FCS.checksum(body).to_le_bytes() != fcs {
            return Err(LowpanError::BadFcs);
        }
        if body[..2] != FRAME_CONTROL {
            return Err(LowpanError::BadFrameControl);
        }
        let u64_at = |i: usize| u64::from_le_bytes(body[i..i + 8].try_into().expect("8 bytes"));
        Ok(Frame {
            mac: MacHeader {
                seq: body[2],
                pan: u16::from_le_bytes([body[3], body[4]]),
                dst: u64_at(5),
                src: u64_at(13),
            },
            payload: body[21..].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UdpHeader {
    pub src: NodeAddr,
    pub dst: NodeAddr,
    pub src_port: u16,
    pub dst_port: u16,
}

pub const COAP_PORT: u16 = 5683;
pub const COAPS_PORT: u16 = 5684;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AdaptationProfile {
    SixLowpanUdp(UdpHeader),
    /// NDN packets ride directly in frames, behind `header_cost` bytes of
    /// optional link adaptation.
    NdnFace {
        header_cost: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProfileKind {
    SixLowpanUdp,
    NdnFace { header_cost: usize },
}

impl AdaptationProfile {
    pub fn header_cost(&self) -> usize {
        match self {
            AdaptationProfile::SixLowpanUdp(_) => SIXLOWPAN_UDP_COST,
            AdaptationProfile::NdnFace { header_cost } => *header_cost,
        }
    }

    pub fn kind(&self) -> ProfileKind {
        match self {
            AdaptationProfile::SixLowpanUdp(_) => ProfileKind::SixLowpanUdp,
            AdaptationProfile::NdnFace { header_cost } => ProfileKind::NdnFace {
                header_cost: *header_cost,
            },
        }
    }

    fn write_header(&self, upper: &[u8], out: &mut Vec<u8>) {
        match self {
            AdaptationProfile::SixLowpanUdp(h) => {
                out.extend_from_slice(&IPHC);
                out.extend_from_slice(&ipv6_addr(h.src));
                out.extend_from_slice(&ipv6_addr(h.dst));
                out.extend_from_slice(&h.src_port.to_be_bytes());
                out.extend_from_slice(&h.dst_port.to_be_bytes());
                out.extend_from_slice(&udp_checksum(h, upper).to_be_bytes());
            }
            AdaptationProfile::NdnFace { header_cost } => {
                if *header_cost > 0 {
                    out.push(NDN_FACE_DISPATCH);
                    out.resize(out.len() + header_cost - 1, 0);
                }
            }
        }
    }
}

fn ipv6_addr(node: NodeAddr) -> [u8; 16] {
    let mut a = [0u8; 16];
    a[..4].copy_from_slice(&[0x20, 0x01, 0x0d, 0xb8]);
    a[14..].copy_from_slice(&node.to_be_bytes());
    a
}

fn udp_checksum(h: &UdpHeader, upper: &[u8]) -> u16 {
    let mut sum: u32 = h.src as u32 + h.dst as u32 + h.src_port as u32 + h.dst_port as u32;
    sum += upper.len() as u32 + 17;
    for chunk in upper.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += word as u32;
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Reassembled adaptation-layer unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datagram {
    pub udp: Option<UdpHeader>,
    pub upper: Vec<u8>,
}

/// Splits datagram bytes into the adaptation header and upper-layer bytes.
pub fn parse_datagram(kind: ProfileKind, bytes: &[u8]) -> Result<Datagram, LowpanError> {
    match kind {
        ProfileKind::SixLowpanUdp => {
            if bytes.len() < SIXLOWPAN_UDP_COST {
                return Err(LowpanError::HeaderTruncated);
            }
            if bytes[..3] != IPHC {
                return Err(LowpanError::BadDispatch(bytes[0]));
            }
            let addr = |i: usize| u16::from_be_bytes([bytes[i + 14], bytes[i + 15]]);
            let word = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
            let h = UdpHeader {
                src: addr(3),
                dst: addr(19),
                src_port: word(35),
                dst_port: word(37),
            };
            let upper = &bytes[SIXLOWPAN_UDP_COST..];
            if word(39) != udp_checksum(&h, upper) {
                return Err(LowpanError::BadChecksum);
            }
            Ok(Datagram {
                udp: Some(h),
                upper: upper.to_vec(),
            })
        }
        ProfileKind::NdnFace { header_cost } => {
            if bytes.len() < header_cost {
                return Err(LowpanError::HeaderTruncated);
            }
            if header_cost > 0 && bytes[0] != NDN_FACE_DISPATCH {
                return Err(LowpanError::BadDispatch(bytes[0]));
            }
            Ok(Datagram {
                udp: None,
                upper: bytes[header_cost..].to_vec(),
            })
        }
    }
}

/// Per-link transmit state: addressing plus MAC sequence and datagram tag
/// counters.
#[derive(Clone, Debug, Default)]
pub struct Framer {
    pub pan: u16,
    pub src: u64,
    seq: u8,
    tag: u16,
}

impl Framer {
    pub fn new(pan: u16, src: u64) -> Self {
        Framer {
            pan,
            src,
            seq: 0,
            tag: 0,
        }
    }

    fn mac(&mut self, dst: u64) -> MacHeader {
        let seq = self.seq;
        self.seq = self.seq.wrapping_add(1);
        MacHeader {
            seq,
            pan: self.pan,
            dst,
            src: self.src,
        }
    }

    /// Adds the adaptation header and frames the result.
    pub fn frame_up(&mut self, dst: u64, profile: &AdaptationProfile, upper: &[u8]) -> Result<Vec<Frame>, LowpanError> {
        let mut datagram = Vec::with_capacity(profile.header_cost() + upper.len());
        profile.write_header(upper, &mut datagram);
        datagram.extend_from_slice(upper);
        self.frame_datagram(dst, &datagram)
    }

    /// Frames an already adapted datagram, fragmenting when it exceeds the
    /// per-frame budget.
    pub fn frame_datagram(&mut self, dst: u64, datagram: &[u8]) -> Result<Vec<Frame>, LowpanError> {
        if datagram.len() <= FRAME_BUDGET {
            return Ok(vec![Frame {
                mac: self.mac(dst),
                payload: datagram.to_vec(),
            }]);
        }
        if datagram.len() > MAX_DATAGRAM_LEN {
            return Err(LowpanError::DatagramTooLarge { len: datagram.len() });
        }
        let tag = self.tag;
        self.tag = self.tag.wrapping_add(1);
        let size = (datagram.len() as u16).to_be_bytes();
        let tag_bytes = tag.to_be_bytes();
        let (head, tail) = datagram.split_at(FIRST_FRAGMENT_DATA);

        let mut first = vec![FRAG1_DISPATCH | size[0], size[1], tag_bytes[0], tag_bytes[1]];
        first.extend_from_slice(head);
        let mut second = vec![
            FRAGN_DISPATCH | size[0],
            size[1],
            tag_bytes[0],
            tag_bytes[1],
            FIRST_FRAGMENT_DATA as u8,
        ];
        second.extend_from_slice(tail);
        Ok(vec![
            Frame {
                mac: self.mac(dst),
                payload: first,
            },
            Frame {
                mac: self.mac(dst),
                payload: second,
            },
        ])
    }
}

/// Frames `upper` with default addressing.
pub fn frame_up(profile: &AdaptationProfile, upper: &[u8]) -> Result<Vec<Frame>, LowpanError> {
    Framer::default().frame_up(0, profile, upper)
}

/// Reassembles a complete frame set for one datagram.
pub fn frame_down(kind: ProfileKind, frames: &[Frame]) -> Result<Datagram, LowpanError> {
    let bytes = match frames {
        [] => return Err(LowpanError::NoFrames),
        [single] => match single.fragment() {
            None => single.payload.clone(),
            Some(_) => return Err(LowpanError::MissingFragment),
        },
        [a, b] => {
            let (fa, fb) = match (a.fragment(), b.fragment()) {
                (Some(fa), Some(fb)) => (fa, fb),
                _ => return Err(LowpanError::FragmentMismatch),
            };
            let (first, second, f1, f2) = if fa.index == 0 { (a, b, fa, fb) } else { (b, a, fb, fa) };
            if f1.index != 0
                || f2.index != 1
                || f1.tag != f2.tag
                || f1.datagram_size != f2.datagram_size
                || first.mac.src != second.mac.src
            {
                return Err(LowpanError::FragmentMismatch);
            }
            join(first, second, f1, f2)?
        }
        _ => return Err(LowpanError::FragmentMismatch),
    };
    parse_datagram(kind, &bytes)
}

fn join(first: &Frame, second: &Frame, f1: FragmentInfo, f2: FragmentInfo) -> Result<Vec<u8>, LowpanError> {
    let head = &first.payload[FRAG1_HEADER_LEN..];
    let tail = &second.payload[FRAGN_HEADER_LEN..];
    if f2.offset as usize != head.len() || head.len() + tail.len() != f1.datagram_size as usize {
        return Err(LowpanError::FragmentMismatch);
    }
    let mut out = head.to_vec();
    out.extend_from_slice(tail);
    Ok(out)
}

pub fn bytes_on_air(frames: &[Frame]) -> usize {
    frames.iter().map(Frame::len).sum()
}

/// Number of frames and total on-air bytes for an upper-layer unit of
/// `upper_len` bytes behind `header_cost` bytes of adaptation.
pub fn frame_sizes(header_cost: usize, upper_len: usize) -> Result<Vec<usize>, LowpanError> {
    let d = header_cost + upper_len;
    if d <= FRAME_BUDGET {
        Ok(vec![MAC_HEADER_LEN + d])
    } else if d <= MAX_DATAGRAM_LEN {
        Ok(vec![
            MAX_FRAME_LEN,
            MAC_HEADER_LEN + FRAGN_HEADER_LEN + d - FIRST_FRAGMENT_DATA,
        ])
    } else {
        Err(LowpanError::DatagramTooLarge { len: d })
    }
}

#[derive(Debug)]
struct Partial {
    started_us: u64,
    first: Option<Frame>,
    second: Option<Frame>,
}

/// Receive-side reassembly buffer owned by one node. Incomplete datagrams
/// are discarded after `timeout_us`.
#[derive(Debug)]
pub struct Reassembler {
    timeout_us: u64,
    pending: BTreeMap<(u64, u16, u16), Partial>,
    lost: u64,
}

impl Reassembler {
    pub fn new(timeout_us: u64) -> Self {
        Reassembler {
            timeout_us,
            pending: BTreeMap::new(),
            lost: 0,
        }
    }

    /// Feeds one received frame; returns the datagram bytes once complete.
    pub fn push(&mut self, frame: Frame, now_us: u64) -> Result<Option<Vec<u8>>, LowpanError> {
        self.expire(now_us);
        let Some(info) = frame.fragment() else {
            return Ok(Some(frame.payload));
        };
        let key = (frame.mac.src, info.tag, info.datagram_size);
        let entry = self.pending.entry(key).or_insert(Partial {
            started_us: now_us,
            first: None,
            second: None,
        });
        if info.index == 0 {
            entry.first = Some(frame);
        } else {
            entry.second = Some(frame);
        }
        if let (Some(a), Some(b)) = (&entry.first, &entry.second) {
            let fa = a.fragment().expect("fragment");
            let fb = b.fragment().expect("fragment");
            let joined = join(a, b, fa, fb);
            self.pending.remove(&key);
            return joined.map(Some);
        }
        Ok(None)
    }

    /// Drops incomplete datagrams older than the timeout; returns how many.
    pub fn expire(&mut self, now_us: u64) -> usize {
        let timeout = self.timeout_us;
        let before = self.pending.len();
        self.pending
            .retain(|_, p| now_us.saturating_sub(p.started_us) < timeout);
        let dropped = before - self.pending.len();
        self.lost += dropped as u64;
        dropped
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn lost(&self) -> u64 {
        self.lost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn udp() -> AdaptationProfile {
        AdaptationProfile::SixLowpanUdp(UdpHeader {
            src: 1,
            dst: 2,
            src_port: COAP_PORT,
            dst_port: COAP_PORT,
        })
    }

    #[test]
    fn budget_constants() {
        assert_eq!(FRAME_BUDGET, 104);
        assert_eq!(SIXLOWPAN_UDP_COST, 41);
    }

    #[test]
    fn full_single_frame() {
        let frames = frame_up(&udp(), &[0xAA; 104 - 41]).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(bytes_on_air(&frames), 127);
        assert_eq!(frames[0].encode().len(), 127);
    }

    #[test]
    fn one_byte_over_fragments() {
        let n = 104 - 41 + 1;
        let frames = frame_up(&udp(), &vec![0xAA; n]).unwrap();
        assert_eq!(frames.len(), 2);
        let remainder = 41 + n - 100;
        assert_eq!(bytes_on_air(&frames), 127 + (23 + 5 + remainder));
        assert_eq!(frames[0].fragment_index(), Some(0));
        assert_eq!(frames[1].fragment_index(), Some(1));
    }

    #[test]
    fn empty_upper_payload() {
        let frames = frame_up(&udp(), &[]).unwrap();
        assert_eq!(bytes_on_air(&frames), 23 + 41);
        let ndn = frame_up(&AdaptationProfile::NdnFace { header_cost: 0 }, &[]).unwrap();
        assert_eq!(bytes_on_air(&ndn), 23);
    }

    #[test]
    fn three_fragments_out_of_scope() {
        let err = frame_up(&udp(), &[0; MAX_DATAGRAM_LEN - 41 + 1]).unwrap_err();
        assert!(matches!(err, LowpanError::DatagramTooLarge { .. }));
        assert!(frame_up(&udp(), &[0; MAX_DATAGRAM_LEN - 41]).is_ok());
    }

    #[test]
    fn frame_down_inverts_frame_up() {
        for n in [0, 10, 63, 64, 120, 158] {
            let upper: Vec<u8> = (0..n as u8).collect();
            let frames = frame_up(&udp(), &upper).unwrap();
            let dg = frame_down(ProfileKind::SixLowpanUdp, &frames).unwrap();
            assert_eq!(dg.upper, upper);
            assert_eq!(dg.udp.unwrap().dst, 2);
        }
    }

    #[test]
    fn lone_fragment_is_lost() {
        let frames = frame_up(&udp(), &[1; 100]).unwrap();
        assert_eq!(
            frame_down(ProfileKind::SixLowpanUdp, &frames[..1]),
            Err(LowpanError::MissingFragment)
        );
        let mut r = Reassembler::new(2_000_000);
        assert_eq!(r.push(frames[0].clone(), 0).unwrap(), None);
        assert_eq!(r.expire(2_000_000), 1);
        assert_eq!(r.lost(), 1);
    }

    #[test]
    fn frame_wire_round_trip_and_fcs() {
        let frames = Framer::new(0xABCD, 7).frame_up(9, &udp(), b"hello").unwrap();
        let bytes = frames[0].encode();
        assert_eq!(Frame::decode(&bytes).unwrap(), frames[0]);
        let mut bad = bytes.clone();
        bad[25] ^= 0x10;
        assert_eq!(Frame::decode(&bad), Err(LowpanError::BadFcs));
    }

    #[test]
    fn frame_sizes_match_framer() {
        for n in 0..=158 {
            let frames = frame_up(&udp(), &vec![0; n]).unwrap();
            let sizes: Vec<usize> = frames.iter().map(Frame::len).collect();
            assert_eq!(frame_sizes(41, n).unwrap(), sizes);
        }
    }
}
