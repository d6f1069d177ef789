//! DTLS-1.2-style channel security: record framing, a ten-record PSK
//! handshake and AEAD-protected application records.
//!
//! Handshake messages are size-faithful stand-ins: they carry the fields the
//! state machine needs (randoms, cookie, verify data) padded to configurable
//! record sizes. The Finished messages are sealed under the negotiated keys
//! like real ones.
//!
//! Flights, one record per datagram:
//!
//! ```text
//! C: ClientHello
//! S: HelloVerifyRequest
//! C: ClientHello (with cookie)
//! S: ServerHello, ServerHelloDone
//! C: ClientKeyExchange, ChangeCipherSpec, Finished
//! S: ChangeCipherSpec, Finished
//! ```

use crate::secctx::{
    hmac_sign, ContextParams, Key, NonceScheme, OpCounts, Role, SealedPayload, SecError, SecurityContext,
    IMPLICIT_IV_LEN, KEY_LEN, TAG_LEN,
};

pub const RECORD_HEADER_LEN: usize = 13;
pub const HANDSHAKE_HEADER_LEN: usize = 12;
pub const EXPLICIT_NONCE_LEN: usize = 8;
pub const PROTECTION_OVERHEAD: usize = RECORD_HEADER_LEN + EXPLICIT_NONCE_LEN + TAG_LEN;
pub const VERSION: [u8; 2] = [0xFE, 0xFD];
pub const HANDSHAKE_RECORDS: usize = 10;
const VERIFY_DATA_LEN: usize = 12;
const RANDOM_LEN: usize = 32;
const MAX_SEQUENCE: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("no established session; a handshake is required")]
    MustHandshake,
    #[error("session already established")]
    AlreadyEstablished,
    #[error("handshake aborted: {0}")]
    HandshakeAbort(&'static str),
    #[error(transparent)]
    Sec(#[from] SecError),
    #[error("record truncated")]
    Truncated,
    #[error("unsupported record version {0:02x?}")]
    BadVersion([u8; 2]),
    #[error("record length field {declared} does not match {actual} body bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown content type {0}")]
    UnknownContentType(u8),
    #[error("malformed handshake message")]
    BadHandshake,
    #[error("record epoch {0} does not match the session")]
    EpochMismatch(u16),
    #[error("invalid handshake size configuration: {0}")]
    BadSizes(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ContentType {
    ChangeCipherSpec,
    Alert,
    Handshake,
    ApplicationData,
}

impl ContentType {
    pub fn code(self) -> u8 {
        match self {
            ContentType::ChangeCipherSpec => 20,
            ContentType::Alert => 21,
            ContentType::Handshake => 22,
            ContentType::ApplicationData => 23,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, ChannelError> {
        Ok(match code {
            20 => ContentType::ChangeCipherSpec,
            21 => ContentType::Alert,
            22 => ContentType::Handshake,
            23 => ContentType::ApplicationData,
            other => return Err(ChannelError::UnknownContentType(other)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub content_type: ContentType,
    pub epoch: u16,
    /// 48-bit record sequence number.
    pub sequence: u64,
    pub body: Vec<u8>,
}

impl Record {
    pub fn len(&self) -> usize {
        RECORD_HEADER_LEN + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn header(&self) -> [u8; RECORD_HEADER_LEN] {
        let mut h = [0u8; RECORD_HEADER_LEN];
        h[0] = self.content_type.code();
        h[1..3].copy_from_slice(&VERSION);
        h[3..5].copy_from_slice(&self.epoch.to_be_bytes());
        h[5..11].copy_from_slice(&self.sequence.to_be_bytes()[2..]);
        h[11..13].copy_from_slice(&(self.body.len() as u16).to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header().to_vec();
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes exactly one record.
    pub fn decode(bytes: &[u8]) -> Result<Record, ChannelError> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err(ChannelError::Truncated);
        }
        let content_type = ContentType::from_code(bytes[0])?;
        let version = [bytes[1], bytes[2]];
        if version != VERSION {
            return Err(ChannelError::BadVersion(version));
        }
        let epoch = u16::from_be_bytes([bytes[3], bytes[4]]);
        let sequence = bytes[5..11].iter().fold(0u64, |a, b| (a << 8) | *b as u64);
        let declared = u16::from_be_bytes([bytes[11], bytes[12]]) as usize;
        let body = &bytes[RECORD_HEADER_LEN..];
        if declared != body.len() {
            return Err(ChannelError::LengthMismatch {
                declared,
                actual: body.len(),
            });
        }
        Ok(Record {
            content_type,
            epoch,
            sequence,
            body: body.to_vec(),
        })
    }

    /// Handshake message type, for handshake records in epoch 0.
    pub fn handshake_type(&self) -> Option<HandshakeType> {
        if self.content_type != ContentType::Handshake || self.epoch != 0 {
            return None;
        }
        parse_handshake(&self.body).ok().map(|(t, _)| t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum HandshakeType {
    ClientHello,
    ServerHello,
    HelloVerifyRequest,
    ServerHelloDone,
    ClientKeyExchange,
    Finished,
}

impl HandshakeType {
    fn code(self) -> u8 {
        match self {
            HandshakeType::ClientHello => 1,
            HandshakeType::ServerHello => 2,
            HandshakeType::HelloVerifyRequest => 3,
            HandshakeType::ServerHelloDone => 14,
            HandshakeType::ClientKeyExchange => 16,
            HandshakeType::Finished => 20,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => HandshakeType::ClientHello,
            2 => HandshakeType::ServerHello,
            3 => HandshakeType::HelloVerifyRequest,
            14 => HandshakeType::ServerHelloDone,
            16 => HandshakeType::ClientKeyExchange,
            20 => HandshakeType::Finished,
            _ => return None,
        })
    }
}

fn handshake_message(ty: HandshakeType, msg_seq: u16, content: &[u8]) -> Vec<u8> {
    let len = (content.len() as u32).to_be_bytes();
    let mut out = Vec::with_capacity(HANDSHAKE_HEADER_LEN + content.len());
    out.push(ty.code());
    out.extend_from_slice(&len[1..]);
    out.extend_from_slice(&msg_seq.to_be_bytes());
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&len[1..]);
    out.extend_from_slice(content);
    out
}

fn parse_handshake(body: &[u8]) -> Result<(HandshakeType, &[u8]), ChannelError> {
    if body.len() < HANDSHAKE_HEADER_LEN {
        return Err(ChannelError::BadHandshake);
    }
    let ty = HandshakeType::from_code(body[0]).ok_or(ChannelError::BadHandshake)?;
    let u24 = |i: usize| u32::from_be_bytes([0, body[i], body[i + 1], body[i + 2]]) as usize;
    let content = &body[HANDSHAKE_HEADER_LEN..];
    if u24(1) != content.len() || u24(6) != 0 || u24(9) != content.len() {
        return Err(ChannelError::BadHandshake);
    }
    Ok((ty, content))
}

/// On-wire sizes of the handshake records, record header included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandshakeSizes {
    pub client_hello: usize,
    pub cookie_len: usize,
    pub server_hello: usize,
    pub client_key_exchange: usize,
}

impl Default for HandshakeSizes {
    fn default() -> Self {
        HandshakeSizes {
            client_hello: 105,
            cookie_len: 16,
            server_hello: 106,
            client_key_exchange: 40,
        }
    }
}

const HS_RECORD_MIN: usize = RECORD_HEADER_LEN + HANDSHAKE_HEADER_LEN;

impl HandshakeSizes {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(1..=32).contains(&self.cookie_len) {
            return Err(ChannelError::BadSizes("cookie_len must be 1..=32"));
        }
        if self.client_hello < HS_RECORD_MIN + 2 + RANDOM_LEN + 2 {
            return Err(ChannelError::BadSizes("client_hello too small"));
        }
        if self.server_hello < HS_RECORD_MIN + 2 + RANDOM_LEN {
            return Err(ChannelError::BadSizes("server_hello too small"));
        }
        if self.client_key_exchange < HS_RECORD_MIN + 3 {
            return Err(ChannelError::BadSizes("client_key_exchange too small"));
        }
        if self.client_hello + self.cookie_len > u16::MAX as usize || self.server_hello > u16::MAX as usize {
            return Err(ChannelError::BadSizes("record too large"));
        }
        Ok(())
    }

    pub fn client_hello_with_cookie(&self) -> usize {
        self.client_hello + self.cookie_len
    }

    pub fn hello_verify_request(&self) -> usize {
        HS_RECORD_MIN + 3 + self.cookie_len
    }

    pub fn server_hello_done(&self) -> usize {
        HS_RECORD_MIN
    }

    pub fn change_cipher_spec(&self) -> usize {
        RECORD_HEADER_LEN + 1
    }

    pub fn finished(&self) -> usize {
        RECORD_HEADER_LEN + EXPLICIT_NONCE_LEN + HANDSHAKE_HEADER_LEN + VERIFY_DATA_LEN + TAG_LEN
    }

    /// Record sizes of a loss-free handshake, in transmission order.
    pub fn sequence(&self) -> [usize; HANDSHAKE_RECORDS] {
        [
            self.client_hello,
            self.hello_verify_request(),
            self.client_hello_with_cookie(),
            self.server_hello,
            self.server_hello_done(),
            self.client_key_exchange,
            self.change_cipher_spec(),
            self.finished(),
            self.change_cipher_spec(),
            self.finished(),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub sizes: HandshakeSizes,
    /// Optional record replay protection; off by default.
    pub replay_window: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    Idle,
    ClientHelloSent,
    AwaitingServerHello,
    AwaitingServerFinished,
    HelloVerifySent,
    ServerHelloSent,
    Established,
}

/// One endpoint of a channel. Owns its handshake state and, once
/// established, the traffic keys.
#[derive(Clone, Debug)]
pub struct Session {
    role: Role,
    psk: Key,
    config: ChannelConfig,
    phase: Phase,
    entropy: u64,
    local_random: [u8; RANDOM_LEN],
    peer_random: Option<[u8; RANDOM_LEN]>,
    cookie: Vec<u8>,
    epoch0_seq: u64,
    msg_seq: u16,
    flight: Vec<Record>,
    got_peer_ccs: bool,
    pending: Option<SecurityContext>,
    ctx: Option<SecurityContext>,
    retired_ops: OpCounts,
    handshakes: u32,
    handshake_records_sent: u64,
}

impl Session {
    pub fn new(role: Role, psk: Key, config: ChannelConfig, seed: u64) -> Result<Self, ChannelError> {
        config.sizes.validate()?;
        Ok(Session {
            role,
            psk,
            config,
            phase: Phase::Idle,
            entropy: seed,
            local_random: [0; RANDOM_LEN],
            peer_random: None,
            cookie: Vec::new(),
            epoch0_seq: 0,
            msg_seq: 0,
            flight: Vec::new(),
            got_peer_ccs: false,
            pending: None,
            ctx: None,
            retired_ops: OpCounts::default(),
            handshakes: 0,
            handshake_records_sent: 0,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_established(&self) -> bool {
        self.phase == Phase::Established
    }

    pub fn psk(&self) -> &Key {
        &self.psk
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Completed handshakes over the lifetime of this endpoint.
    pub fn handshakes(&self) -> u32 {
        self.handshakes
    }

    pub fn handshake_records_sent(&self) -> u64 {
        self.handshake_records_sent
    }

    /// Whether a flight is outstanding and should be resent on timeout.
    pub fn awaiting_flight(&self) -> bool {
        matches!(
            self.phase,
            Phase::ClientHelloSent
                | Phase::AwaitingServerHello
                | Phase::AwaitingServerFinished
                | Phase::ServerHelloSent
        )
    }

    /// Cumulative operation counts, including wiped sessions.
    pub fn ops(&self) -> OpCounts {
        let mut ops = self.retired_ops;
        for c in [&self.ctx, &self.pending].into_iter().flatten() {
            ops += c.ops();
        }
        ops
    }

    /// Drops all session state; only the pre-shared key and configuration
    /// survive.
    pub fn wipe_session(&mut self) {
        let ops = self.ops();
        self.retired_ops = ops;
        self.ctx = None;
        self.pending = None;
        self.phase = Phase::Idle;
        self.flight.clear();
        self.peer_random = None;
        self.cookie.clear();
        self.got_peer_ccs = false;
        self.msg_seq = 0;
    }

    fn fresh_random(&mut self) -> [u8; RANDOM_LEN] {
        self.entropy = self.entropy.wrapping_add(1);
        let mut input = b"random".to_vec();
        input.push(matches!(self.role, Role::Client) as u8);
        input.extend_from_slice(&self.entropy.to_be_bytes());
        hmac_sign(&self.psk, &input)
    }

    fn epoch0(&mut self, ty: HandshakeType, content: &[u8]) -> Record {
        let body = handshake_message(ty, self.msg_seq, content);
        self.msg_seq = self.msg_seq.wrapping_add(1);
        self.record0(ContentType::Handshake, body)
    }

    fn record0(&mut self, content_type: ContentType, body: Vec<u8>) -> Record {
        let r = Record {
            content_type,
            epoch: 0,
            sequence: self.epoch0_seq,
            body,
        };
        self.epoch0_seq = (self.epoch0_seq + 1) & MAX_SEQUENCE;
        r
    }

    fn padded(mut content: Vec<u8>, record_len: usize) -> Vec<u8> {
        content.resize(record_len - HS_RECORD_MIN, 0);
        content
    }

    fn client_hello(&mut self) -> Record {
        let sizes = self.config.sizes;
        let mut c = VERSION.to_vec();
        c.extend_from_slice(&self.local_random);
        c.push(0);
        c.push(self.cookie.len() as u8);
        c.extend_from_slice(&self.cookie);
        let len = if self.cookie.is_empty() {
            sizes.client_hello
        } else {
            sizes.client_hello_with_cookie()
        };
        let content = Self::padded(c, len);
        self.epoch0(HandshakeType::ClientHello, &content)
    }

    fn cookie_for(&self, client_random: &[u8]) -> Vec<u8> {
        let mut input = b"cookie".to_vec();
        input.extend_from_slice(client_random);
        hmac_sign(&self.psk, &input)[..self.config.sizes.cookie_len].to_vec()
    }

    fn derive_context(
        &self,
        client_random: &[u8; 32],
        server_random: &[u8; 32],
    ) -> Result<SecurityContext, ChannelError> {
        let mut seed = b"master secret".to_vec();
        seed.extend_from_slice(client_random);
        seed.extend_from_slice(server_random);
        let master = hmac_sign(&self.psk, &seed);
        let key = |label: &[u8]| -> Key {
            let mut k = [0u8; KEY_LEN];
            k.copy_from_slice(&hmac_sign(&master, label)[..KEY_LEN]);
            k
        };
        let mut iv = [0u8; IMPLICIT_IV_LEN];
        iv.copy_from_slice(&hmac_sign(&master, b"iv")[..IMPLICIT_IV_LEN]);
        let (client_key, server_key) = (key(b"client write key"), key(b"server write key"));
        let (send, recv) = match self.role {
            Role::Client => (client_key, server_key),
            Role::Server => (server_key, client_key),
        };
        let epoch_id = 1u16.to_be_bytes().to_vec();
        let params = ContextParams {
            psk: self.psk,
            salt: Vec::new(),
            resource_uri: Vec::new(),
            sender_id: epoch_id.clone(),
            recipient_id: epoch_id,
            role: self.role,
        };
        let ctx = SecurityContext::from_session_keys(params, send, recv, iv)?;
        Ok(if self.config.replay_window {
            ctx
        } else {
            ctx.without_replay_window()
        })
    }

    fn verify_data(ctx: &SecurityContext, label: &[u8]) -> Vec<u8> {
        let mut input = label.to_vec();
        input.extend_from_slice(ctx.implicit_iv());
        hmac_sign(ctx.psk(), &input)[..VERIFY_DATA_LEN].to_vec()
    }

    fn finished_label(role: Role) -> &'static [u8] {
        match role {
            Role::Client => b"client finished",
            Role::Server => b"server finished",
        }
    }

    fn peer_role(&self) -> Role {
        match self.role {
            Role::Client => Role::Server,
            Role::Server => Role::Client,
        }
    }

    /// Change cipher spec plus the sealed Finished message.
    fn finished_flight(&mut self, ctx: &mut SecurityContext) -> Result<[Record; 2], ChannelError> {
        let ccs = self.record0(ContentType::ChangeCipherSpec, vec![1]);
        let verify = Self::verify_data(ctx, Self::finished_label(self.role));
        let msg = handshake_message(HandshakeType::Finished, self.msg_seq, &verify);
        self.msg_seq = self.msg_seq.wrapping_add(1);
        let fin = seal_record(ctx, ContentType::Handshake, &msg)?;
        Ok([ccs, fin])
    }

    fn check_finished(&self, ctx: &mut SecurityContext, rec: &Record) -> Result<(), ChannelError> {
        let plain = open_record(ctx, rec).map_err(|_| ChannelError::HandshakeAbort("finished does not verify"))?;
        let (ty, verify) = parse_handshake(&plain)?;
        if ty != HandshakeType::Finished || verify != Self::verify_data(ctx, Self::finished_label(self.peer_role())) {
            return Err(ChannelError::HandshakeAbort("finished does not verify"));
        }
        Ok(())
    }

    fn send_flight(&mut self, flight: Vec<Record>) -> Vec<Record> {
        self.handshake_records_sent += flight.len() as u64;
        self.flight = flight.clone();
        flight
    }

    fn resend_flight(&mut self) -> Vec<Record> {
        self.handshake_records_sent += self.flight.len() as u64;
        self.flight.clone()
    }

    /// Resends the last flight after a retransmission timeout.
    pub fn retransmit_flight(&mut self) -> Vec<Record> {
        if !self.awaiting_flight() {
            return Vec::new();
        }
        self.resend_flight()
    }

    fn abort(&mut self, why: &'static str) -> ChannelError {
        self.wipe_session();
        ChannelError::HandshakeAbort(why)
    }

    /// Advances the handshake. `None` starts it on the client. Returns the
    /// records to transmit, one per datagram.
    pub fn handshake_step(&mut self, incoming: Option<&Record>) -> Result<Vec<Record>, ChannelError> {
        match (self.role, incoming) {
            (Role::Client, _) | (Role::Server, None) if self.is_established() => Err(ChannelError::AlreadyEstablished),
            (Role::Server, Some(r)) if self.is_established() => {
                if r.handshake_type() == Some(HandshakeType::ClientHello) {
                    self.wipe_session();
                    self.server_step(r)
                } else {
                    Err(ChannelError::AlreadyEstablished)
                }
            }
            (Role::Client, None) => {
                if self.phase != Phase::Idle {
                    return Ok(Vec::new());
                }
                self.local_random = self.fresh_random();
                self.cookie.clear();
                let ch = self.client_hello();
                self.phase = Phase::ClientHelloSent;
                Ok(self.send_flight(vec![ch]))
            }
            (Role::Client, Some(r)) => self.client_step(r),
            (Role::Server, None) => Ok(Vec::new()),
            (Role::Server, Some(r)) => self.server_step(r),
        }
    }

    /// Entry point for any handshake-layer record received by the
    /// simulator. Unlike [`handshake_step`](Self::handshake_step), it
    /// tolerates retransmitted flights after establishment.
    pub fn on_handshake_record(&mut self, rec: &Record) -> Result<Vec<Record>, ChannelError> {
        if !self.is_established() {
            return self.handshake_step(Some(rec));
        }
        match self.role {
            Role::Server if rec.handshake_type() == Some(HandshakeType::ClientHello) => self.handshake_step(Some(rec)),
            // the client resent its final flight, so ours was lost
            Role::Server if rec.epoch == 1 && rec.content_type == ContentType::Handshake => Ok(self.resend_flight()),
            _ => Ok(Vec::new()),
        }
    }

    fn client_step(&mut self, r: &Record) -> Result<Vec<Record>, ChannelError> {
        let ty = match (r.content_type, r.epoch) {
            (ContentType::ChangeCipherSpec, 0) => None,
            (ContentType::Handshake, 0) => Some(parse_handshake(&r.body)?.0),
            (ContentType::Handshake, 1) => Some(HandshakeType::Finished),
            _ => return Err(self.abort("unexpected record")),
        };
        use HandshakeType::*;
        match (self.phase, ty) {
            (_, Some(ClientHello)) | (_, Some(ClientKeyExchange)) => Err(self.abort("peer sent a client message")),
            (Phase::ClientHelloSent, Some(HelloVerifyRequest)) => {
                let (_, content) = parse_handshake(&r.body)?;
                let cookie = content.get(3..).ok_or(ChannelError::BadHandshake)?;
                if content.len() < 3 || content[2] as usize != cookie.len() || cookie.is_empty() {
                    return Err(self.abort("malformed hello verify request"));
                }
                self.cookie = cookie.to_vec();
                let ch = self.client_hello();
                self.phase = Phase::AwaitingServerHello;
                Ok(self.send_flight(vec![ch]))
            }
            (Phase::AwaitingServerHello, Some(HelloVerifyRequest)) => Ok(self.resend_flight()),
            (Phase::AwaitingServerHello, Some(ServerHello)) => {
                let (_, content) = parse_handshake(&r.body)?;
                let random: [u8; RANDOM_LEN] = content
                    .get(2..2 + RANDOM_LEN)
                    .and_then(|s| s.try_into().ok())
                    .ok_or(ChannelError::BadHandshake)?;
                self.peer_random = Some(random);
                Ok(Vec::new())
            }
            (Phase::AwaitingServerHello, Some(ServerHelloDone)) => {
                let Some(server_random) = self.peer_random else {
                    return Ok(Vec::new());
                };
                let mut ctx = self.derive_context(&self.local_random, &server_random)?;
                let cke_len = self.config.sizes.client_key_exchange;
                let mut identity = (b"sensor".len() as u16).to_be_bytes().to_vec();
                identity.extend_from_slice(b"sensor");
                let content = Self::padded(identity, cke_len);
                let cke = self.epoch0(ClientKeyExchange, &content);
                let [ccs, fin] = self.finished_flight(&mut ctx)?;
                self.pending = Some(ctx);
                self.phase = Phase::AwaitingServerFinished;
                Ok(self.send_flight(vec![cke, ccs, fin]))
            }
            (Phase::AwaitingServerFinished, Some(ServerHelloDone)) => Ok(self.resend_flight()),
            (Phase::AwaitingServerFinished, Some(ServerHello))
            | (Phase::AwaitingServerFinished, Some(HelloVerifyRequest)) => Ok(Vec::new()),
            (Phase::AwaitingServerFinished, None) => {
                self.got_peer_ccs = true;
                Ok(Vec::new())
            }
            (Phase::AwaitingServerFinished, Some(Finished)) => {
                let mut ctx = self.pending.take().expect("keys derived before finished");
                if let Err(e) = self.check_finished(&mut ctx, r) {
                    self.pending = Some(ctx);
                    return Err(self.abort_with(e));
                }
                self.ctx = Some(ctx);
                self.phase = Phase::Established;
                self.handshakes += 1;
                Ok(Vec::new())
            }
            (Phase::ClientHelloSent, _) | (Phase::AwaitingServerHello, _) => Ok(Vec::new()),
            _ => Err(self.abort("unexpected handshake message")),
        }
    }

    fn abort_with(&mut self, e: ChannelError) -> ChannelError {
        self.wipe_session();
        e
    }

    fn server_step(&mut self, r: &Record) -> Result<Vec<Record>, ChannelError> {
        let ty = match (r.content_type, r.epoch) {
            (ContentType::ChangeCipherSpec, 0) => None,
            (ContentType::Handshake, 0) => Some(parse_handshake(&r.body)?.0),
            (ContentType::Handshake, 1) => Some(HandshakeType::Finished),
            _ => return Err(self.abort("unexpected record")),
        };
        use HandshakeType::*;
        match (self.phase, ty) {
            (_, Some(ClientHello)) => {
                let (_, content) = parse_handshake(&r.body)?;
                if content.len() < 2 + RANDOM_LEN + 2 {
                    return Err(self.abort("malformed client hello"));
                }
                let client_random: [u8; RANDOM_LEN] = content[2..2 + RANDOM_LEN].try_into().expect("length checked");
                let cookie_len = content[2 + RANDOM_LEN + 1] as usize;
                let cookie = content.get(2 + RANDOM_LEN + 2..2 + RANDOM_LEN + 2 + cookie_len);
                let expected = self.cookie_for(&client_random);
                if cookie != Some(expected.as_slice()) {
                    // Stateless reply; no flight is retained for retransmission.
                    let mut c = VERSION.to_vec();
                    c.push(expected.len() as u8);
                    c.extend_from_slice(&expected);
                    self.msg_seq = 0;
                    let hvr = self.epoch0(HelloVerifyRequest, &c);
                    self.handshake_records_sent += 1;
                    if self.phase == Phase::Idle {
                        self.phase = Phase::HelloVerifySent;
                    }
                    return Ok(vec![hvr]);
                }
                if self.phase == Phase::ServerHelloSent && self.peer_random == Some(client_random) {
                    return Ok(self.resend_flight());
                }
                self.peer_random = Some(client_random);
                self.local_random = self.fresh_random();
                self.pending = None;
                self.got_peer_ccs = false;
                let mut c = VERSION.to_vec();
                c.extend_from_slice(&self.local_random);
                let sh_len = self.config.sizes.server_hello;
                let sh = self.epoch0(ServerHello, &Self::padded(c, sh_len));
                let shd = self.epoch0(ServerHelloDone, &[]);
                self.phase = Phase::ServerHelloSent;
                Ok(self.send_flight(vec![sh, shd]))
            }
            (Phase::ServerHelloSent, Some(ClientKeyExchange)) => {
                let client_random = self.peer_random.expect("set with server hello");
                self.pending = Some(self.derive_context(&client_random, &self.local_random)?);
                Ok(Vec::new())
            }
            (Phase::ServerHelloSent, None) => {
                self.got_peer_ccs = true;
                Ok(Vec::new())
            }
            (Phase::ServerHelloSent, Some(Finished)) => {
                let Some(mut ctx) = self.pending.take() else {
                    return Ok(Vec::new());
                };
                if let Err(e) = self.check_finished(&mut ctx, r) {
                    self.pending = Some(ctx);
                    return Err(self.abort_with(e));
                }
                let flight = self.finished_flight(&mut ctx)?;
                self.ctx = Some(ctx);
                self.phase = Phase::Established;
                self.handshakes += 1;
                Ok(self.send_flight(flight.to_vec()))
            }
            (Phase::Idle, _) | (Phase::HelloVerifySent, _) => Ok(Vec::new()),
            _ => Err(self.abort("unexpected handshake message")),
        }
    }

    /// Wraps application bytes in a protected record (epoch 1).
    pub fn protect_record(&mut self, app: &[u8]) -> Result<Record, ChannelError> {
        if !self.is_established() {
            return Err(ChannelError::MustHandshake);
        }
        let ctx = self.ctx.as_mut().expect("established session has keys");
        seal_record(ctx, ContentType::ApplicationData, app)
    }

    pub fn unprotect_record(&mut self, rec: &Record) -> Result<Vec<u8>, ChannelError> {
        if !self.is_established() {
            return Err(ChannelError::MustHandshake);
        }
        if rec.epoch != 1 {
            return Err(ChannelError::EpochMismatch(rec.epoch));
        }
        let ctx = self.ctx.as_mut().expect("established session has keys");
        open_record(ctx, rec)
    }
}

fn record_aad(content_type: ContentType, epoch: u16, seq: u64, len: usize) -> Vec<u8> {
    let mut aad = vec![content_type.code()];
    aad.extend_from_slice(&epoch.to_be_bytes());
    aad.extend_from_slice(&seq.to_be_bytes()[2..]);
    aad.extend_from_slice(&(len as u16).to_be_bytes());
    aad
}

fn seal_record(ctx: &mut SecurityContext, content_type: ContentType, plain: &[u8]) -> Result<Record, ChannelError> {
    let seq = ctx.send_seq() as u64;
    let aad = record_aad(content_type, 1, seq, plain.len());
    let sealed = ctx.seal(&aad, plain, NonceScheme::EpochSeq8 { epoch: 1 })?;
    Ok(Record {
        content_type,
        epoch: 1,
        sequence: seq,
        body: sealed.to_bytes(),
    })
}

fn open_record(ctx: &mut SecurityContext, rec: &Record) -> Result<Vec<u8>, ChannelError> {
    let sealed = SealedPayload::from_bytes(&rec.body, EXPLICIT_NONCE_LEN).ok_or(ChannelError::Truncated)?;
    let explicit_seq = sealed.explicit_nonce_part[2..]
        .iter()
        .fold(0u64, |a, b| (a << 8) | *b as u64);
    if explicit_seq != rec.sequence {
        return Err(ChannelError::Sec(SecError::BadExplicitNonce(EXPLICIT_NONCE_LEN)));
    }
    let aad = record_aad(rec.content_type, rec.epoch, rec.sequence, sealed.ciphertext.len());
    Ok(ctx.open(&aad, &sealed, NonceScheme::EpochSeq8 { epoch: rec.epoch })?)
}

/// Runs a loss-free handshake between two endpoints in memory and returns
/// every record exchanged, in order.
pub fn handshake_in_memory(client: &mut Session, server: &mut Session) -> Result<Vec<Record>, ChannelError> {
    let mut log = Vec::new();
    let mut to_server = client.handshake_step(None)?;
    let mut to_client = Vec::new();
    while !(to_server.is_empty() && to_client.is_empty()) {
        for r in std::mem::take(&mut to_server) {
            log.push(r.clone());
            to_client.extend(server.handshake_step(Some(&r))?);
        }
        for r in std::mem::take(&mut to_client) {
            log.push(r.clone());
            to_server.extend(client.handshake_step(Some(&r))?);
        }
    }
    if !(client.is_established() && server.is_established()) {
        return Err(ChannelError::HandshakeAbort("handshake stalled"));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Session, Session) {
        let cfg = ChannelConfig::default();
        (
            Session::new(Role::Client, [9; 16], cfg, 1).unwrap(),
            Session::new(Role::Server, [9; 16], cfg, 2).unwrap(),
        )
    }

    #[test]
    fn ten_records_and_sizes() {
        let (mut c, mut s) = pair();
        let log = handshake_in_memory(&mut c, &mut s).unwrap();
        assert_eq!(log.len(), HANDSHAKE_RECORDS);
        let sizes: Vec<usize> = log.iter().map(|r| r.encode().len()).collect();
        assert_eq!(sizes, ChannelConfig::default().sizes.sequence().to_vec());
        assert_eq!(c.handshakes(), 1);
        assert_eq!(c.handshake_records_sent() + s.handshake_records_sent(), 10);
    }

    #[test]
    fn record_round_trip_adds_29() {
        let (mut c, mut s) = pair();
        handshake_in_memory(&mut c, &mut s).unwrap();
        let rec = c.protect_record(b"hello world").unwrap();
        assert_eq!(rec.encode().len() - 11, 29);
        let decoded = Record::decode(&rec.encode()).unwrap();
        assert_eq!(s.unprotect_record(&decoded).unwrap(), b"hello world");
    }

    #[test]
    fn established_step_is_error() {
        let (mut c, mut s) = pair();
        handshake_in_memory(&mut c, &mut s).unwrap();
        assert_eq!(c.handshake_step(None), Err(ChannelError::AlreadyEstablished));
    }

    #[test]
    fn wipe_requires_new_handshake_and_keeps_psk() {
        let (mut c, mut s) = pair();
        handshake_in_memory(&mut c, &mut s).unwrap();
        let rec = s.protect_record(b"x").unwrap();
        c.wipe_session();
        c.wipe_session();
        assert_eq!(c.psk(), &[9; 16]);
        assert_eq!(c.protect_record(b"x"), Err(ChannelError::MustHandshake));
        assert_eq!(c.unprotect_record(&rec), Err(ChannelError::MustHandshake));
        // the server accepts a fresh handshake while still established
        let log = handshake_in_memory(&mut c, &mut s).unwrap();
        assert_eq!(log.len(), HANDSHAKE_RECORDS);
        assert_eq!(c.handshakes(), 2);
        let rec = c.protect_record(b"again").unwrap();
        assert_eq!(s.unprotect_record(&rec).unwrap(), b"again");
    }

    #[test]
    fn retransmission_seals_again() {
        let (mut c, mut s) = pair();
        handshake_in_memory(&mut c, &mut s).unwrap();
        let before = c.ops();
        let a = c.protect_record(b"req").unwrap();
        let b = c.protect_record(b"req").unwrap();
        assert_eq!(c.ops().since(before).seals, 2);
        assert_ne!(a.sequence, b.sequence);
    }

    #[test]
    fn unexpected_message_aborts() {
        let (mut c, _) = pair();
        let ch = c.handshake_step(None).unwrap();
        assert!(matches!(
            c.handshake_step(Some(&ch[0])),
            Err(ChannelError::HandshakeAbort(_))
        ));
        assert_eq!(c.phase(), Phase::Idle);
    }

    #[test]
    fn lost_server_flight_recovered_by_client_retransmission() {
        let (mut c, mut s) = pair();
        let ch = c.handshake_step(None).unwrap();
        let hvr = s.handshake_step(Some(&ch[0])).unwrap();
        let ch2 = c.handshake_step(Some(&hvr[0])).unwrap();
        let _lost = s.handshake_step(Some(&ch2[0])).unwrap();
        let again = c.retransmit_flight();
        let flight = s.handshake_step(Some(&again[0])).unwrap();
        assert_eq!(flight.len(), 2);
        let mut out = Vec::new();
        for r in &flight {
            out.extend(c.handshake_step(Some(r)).unwrap());
        }
        assert_eq!(out.len(), 3);
        let mut fin = Vec::new();
        for r in &out {
            fin.extend(s.handshake_step(Some(r)).unwrap());
        }
        for r in &fin {
            c.handshake_step(Some(r)).unwrap();
        }
        assert!(c.is_established() && s.is_established());
    }

    #[test]
    fn client_hello_exceeds_link_budget() {
        let sizes = HandshakeSizes::default();
        assert!(sizes.client_hello + crate::lowpan::SIXLOWPAN_UDP_COST > crate::lowpan::FRAME_BUDGET);
        assert!(sizes.server_hello + crate::lowpan::SIXLOWPAN_UDP_COST > crate::lowpan::FRAME_BUDGET);
        for other in [
            sizes.hello_verify_request(),
            sizes.server_hello_done(),
            sizes.client_key_exchange,
            sizes.change_cipher_spec(),
            sizes.finished(),
        ] {
            assert!(other + crate::lowpan::SIXLOWPAN_UDP_COST <= crate::lowpan::FRAME_BUDGET);
        }
    }

    #[test]
    fn record_decode_errors() {
        assert_eq!(Record::decode(&[22, 0xFE]), Err(ChannelError::Truncated));
        let mut bytes = Record {
            content_type: ContentType::Handshake,
            epoch: 0,
            sequence: 5,
            body: vec![1, 2, 3],
        }
        .encode();
        bytes.push(0);
        assert!(matches!(
            Record::decode(&bytes),
            Err(ChannelError::LengthMismatch { .. })
        ));
        bytes.pop();
        bytes[0] = 99;
        assert_eq!(Record::decode(&bytes), Err(ChannelError::UnknownContentType(99)));
    }
}
