//! Security contexts shared by the protected stacks: AEAD seal/open with
//! partially implicit nonces, HMAC signing, and replay windows.
//!
//! Every nonce is 13 bytes. The explicit part that travels on the wire
//! depends on the [`NonceScheme`]:
//!
//! | scheme            | explicit bytes | nonce                                      |
//! |-------------------|----------------|--------------------------------------------|
//! | `TwoByteExplicit` | 2              | implicit IV (11) ‖ sequence (2)            |
//! | `EpochSeq8`       | 8              | implicit IV[..5] ‖ epoch (2) ‖ seq (6)     |
//! | `PartialIv`       | 1..=5          | (IV ‖ 0 0) XOR (id len ‖ id(7) ‖ piv(5))   |
//! | `NameHash`        | 0              | SHA-256(name)[..13]                        |
//!
//! The partial-IV layout is a simplification of the OSCORE nonce: the
//! sender id and partial IV are placed in disjoint, length-tagged regions so
//! distinct (id, piv) pairs never map to the same nonce.

mod crypto;
mod replay;

use std::collections::{BTreeMap, HashMap};

pub use crypto::{
    derive_implicit_iv, hmac_sign, hmac_verify, sha256, Key, Nonce, Tag, IMPLICIT_IV_LEN, KEY_LEN, NONCE_LEN,
    SIGNATURE_LEN, TAG_LEN,
};
pub use replay::{ReplayWindow, WINDOW_WIDTH};

use crypto::{ccm_open, ccm_seal, derive, derive_key};

/// Largest sequence number a context may use before it must be refreshed.
pub const MAX_SEQ: u32 = u16::MAX as u32;
const MAX_ID_LEN: usize = 7;
const MAX_PIV_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SecError {
    #[error("sequence numbers exhausted; security context refresh required")]
    ContextRefreshRequired,
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("replayed sequence number {0}")]
    Replay(u64),
    #[error("explicit nonce part has invalid length {0}")]
    BadExplicitNonce(usize),
    #[error("nonce reused with different input under the same key")]
    NonceReuse,
    #[error("key id must be 1 or 2 bytes, got {0}")]
    InvalidKeyId(usize),
    #[error("context table full ({0} contexts)")]
    ContextLimit(usize),
    #[error("signature verification failed")]
    BadSignature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonceScheme<'a> {
    TwoByteExplicit,
    EpochSeq8 {
        epoch: u16,
    },
    PartialIv,
    /// Nonce is the truncated hash of the given encoded name.
    NameHash(&'a [u8]),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedPayload {
    pub explicit_nonce_part: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub tag: Tag,
}

impl SealedPayload {
    /// `explicit ‖ ciphertext ‖ tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.explicit_nonce_part.len() + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.explicit_nonce_part);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes) for a known explicit length.
    pub fn from_bytes(bytes: &[u8], explicit_len: usize) -> Option<Self> {
        if bytes.len() < explicit_len + TAG_LEN {
            return None;
        }
        let (explicit, rest) = bytes.split_at(explicit_len);
        let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
        Some(SealedPayload {
            explicit_nonce_part: explicit.to_vec(),
            ciphertext: ct.to_vec(),
            tag: tag.try_into().expect("tag length"),
        })
    }
}

/// Cryptographic operation counters; used to compare creation cost across
/// stacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounts {
    pub seals: u64,
    pub opens: u64,
    pub hmac_signs: u64,
    pub hmac_verifies: u64,
}

impl OpCounts {
    pub fn since(self, earlier: OpCounts) -> OpCounts {
        OpCounts {
            seals: self.seals - earlier.seals,
            opens: self.opens - earlier.opens,
            hmac_signs: self.hmac_signs - earlier.hmac_signs,
            hmac_verifies: self.hmac_verifies - earlier.hmac_verifies,
        }
    }
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        self.seals += o.seals;
        self.opens += o.opens;
        self.hmac_signs += o.hmac_signs;
        self.hmac_verifies += o.hmac_verifies;
    }
}

/// Pre-shared key material plus identifiers for one endpoint pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextParams {
    pub psk: Key,
    pub salt: Vec<u8>,
    pub resource_uri: Vec<u8>,
    pub sender_id: Vec<u8>,
    pub recipient_id: Vec<u8>,
    pub role: Role,
}

/// Keys, identifiers, sequence counter and replay window of one endpoint in
/// a sensor/gateway pair. Single-owner mutable state.
#[derive(Clone, Debug)]
pub struct SecurityContext {
    params: ContextParams,
    sender_key: Key,
    recipient_key: Key,
    sender_auth_key: [u8; 32],
    recipient_auth_key: [u8; 32],
    implicit_iv: [u8; IMPLICIT_IV_LEN],
    next_seq: u32,
    replay: Option<ReplayWindow>,
    ops: OpCounts,
    nonce_log: Option<HashMap<Nonce, [u8; 32]>>,
}

impl SecurityContext {
    pub fn new(params: ContextParams) -> Result<Self, SecError> {
        for id in [&params.sender_id, &params.recipient_id] {
            if id.is_empty() || id.len() > 2 {
                return Err(SecError::InvalidKeyId(id.len()));
            }
        }
        let sender_key = derive_key(&params.psk, b"aead key", &params.sender_id);
        let recipient_key = derive_key(&params.psk, b"aead key", &params.recipient_id);
        let sender_auth_key = derive(&params.psk, b"auth key", &params.sender_id);
        let recipient_auth_key = derive(&params.psk, b"auth key", &params.recipient_id);
        let implicit_iv = derive_implicit_iv(&params.salt, &params.resource_uri);
        Ok(SecurityContext {
            params,
            sender_key,
            recipient_key,
            sender_auth_key,
            recipient_auth_key,
            implicit_iv,
            next_seq: 0,
            replay: Some(ReplayWindow::new()),
            ops: OpCounts::default(),
            nonce_log: None,
        })
    }

    /// Context with explicitly supplied traffic keys, e.g. from a handshake.
    pub fn from_session_keys(
        params: ContextParams,
        sender_key: Key,
        recipient_key: Key,
        implicit_iv: [u8; IMPLICIT_IV_LEN],
    ) -> Result<Self, SecError> {
        let mut ctx = Self::new(params)?;
        ctx.sender_key = sender_key;
        ctx.recipient_key = recipient_key;
        ctx.implicit_iv = implicit_iv;
        Ok(ctx)
    }

    /// Turns off replay detection on the receive path.
    pub fn without_replay_window(mut self) -> Self {
        self.replay = None;
        self
    }

    /// Records every nonce used for sealing and fails on reuse with
    /// different input.
    pub fn with_nonce_audit(mut self) -> Self {
        self.nonce_log = Some(HashMap::new());
        self
    }

    pub fn role(&self) -> Role {
        self.params.role
    }

    pub fn sender_id(&self) -> &[u8] {
        &self.params.sender_id
    }

    pub fn recipient_id(&self) -> &[u8] {
        &self.params.recipient_id
    }

    pub fn psk(&self) -> &Key {
        &self.params.psk
    }

    pub fn params(&self) -> &ContextParams {
        &self.params
    }

    pub fn implicit_iv(&self) -> &[u8; IMPLICIT_IV_LEN] {
        &self.implicit_iv
    }

    /// Next sequence number that sealing would consume.
    pub fn send_seq(&self) -> u32 {
        self.next_seq
    }

    pub fn set_send_seq(&mut self, seq: u32) {
        self.next_seq = seq;
    }

    pub fn has_replay_window(&self) -> bool {
        self.replay.is_some()
    }

    pub fn ops(&self) -> OpCounts {
        self.ops
    }

    pub fn nonces_used(&self) -> Option<usize> {
        self.nonce_log.as_ref().map(HashMap::len)
    }

    /// Start-up conditions: sequence counter zero and an empty window.
    pub fn reset(&mut self) {
        self.next_seq = 0;
        if let Some(w) = self.replay.as_mut() {
            w.reset();
        }
    }

    fn take_seq(&mut self) -> Result<u32, SecError> {
        if self.next_seq > MAX_SEQ {
            return Err(SecError::ContextRefreshRequired);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(seq)
    }

    /// Nonce for a partial IV issued by the endpoint with identifier `id`.
    pub fn partial_iv_nonce(&self, id: &[u8], piv: &[u8]) -> Nonce {
        debug_assert!(id.len() <= MAX_ID_LEN && piv.len() <= MAX_PIV_LEN);
        let mut block = [0u8; NONCE_LEN];
        block[0] = id.len() as u8;
        block[1 + MAX_ID_LEN - id.len()..1 + MAX_ID_LEN].copy_from_slice(id);
        block[NONCE_LEN - piv.len()..].copy_from_slice(piv);
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..IMPLICIT_IV_LEN].copy_from_slice(&self.implicit_iv);
        for (n, b) in nonce.iter_mut().zip(block) {
            *n ^= b;
        }
        nonce
    }

    fn explicit_nonce(&self, explicit: &[u8], suffix_from: usize) -> Nonce {
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..suffix_from].copy_from_slice(&self.implicit_iv[..suffix_from]);
        nonce[suffix_from..].copy_from_slice(explicit);
        nonce
    }

    /// Seals under the sender key with a sequence number (or name hash)
    /// chosen by `scheme`.
    pub fn seal(&mut self, aad: &[u8], plaintext: &[u8], scheme: NonceScheme<'_>) -> Result<SealedPayload, SecError> {
        let (explicit, nonce) = match scheme {
            NonceScheme::TwoByteExplicit => {
                let seq = self.take_seq()?;
                let explicit = (seq as u16).to_be_bytes().to_vec();
                let nonce = self.explicit_nonce(&explicit, NONCE_LEN - 2);
                (explicit, nonce)
            }
            NonceScheme::EpochSeq8 { epoch } => {
                let seq = self.take_seq()? as u64;
                let mut explicit = epoch.to_be_bytes().to_vec();
                explicit.extend_from_slice(&seq.to_be_bytes()[2..]);
                let nonce = self.explicit_nonce(&explicit, NONCE_LEN - 8);
                (explicit, nonce)
            }
            NonceScheme::PartialIv => {
                let seq = self.take_seq()?;
                let piv = encode_partial_iv(seq as u64);
                let nonce = self.partial_iv_nonce(&self.params.sender_id, &piv);
                (piv, nonce)
            }
            NonceScheme::NameHash(name) => (Vec::new(), name_nonce(name)),
        };
        let (ciphertext, tag) = self.seal_raw(&nonce, aad, plaintext)?;
        Ok(SealedPayload {
            explicit_nonce_part: explicit,
            ciphertext,
            tag,
        })
    }

    /// Seals with a caller-supplied nonce; nothing explicit goes on the wire.
    pub fn seal_with_nonce(&mut self, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> Result<SealedPayload, SecError> {
        let (ciphertext, tag) = self.seal_raw(nonce, aad, plaintext)?;
        Ok(SealedPayload {
            explicit_nonce_part: Vec::new(),
            ciphertext,
            tag,
        })
    }

    fn seal_raw(&mut self, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> Result<(Vec<u8>, Tag), SecError> {
        if let Some(log) = self.nonce_log.as_mut() {
            let mut input = (aad.len() as u64).to_be_bytes().to_vec();
            input.extend_from_slice(aad);
            input.extend_from_slice(plaintext);
            let digest = sha256(&input);
            match log.get(nonce) {
                Some(prev) if *prev != digest => return Err(SecError::NonceReuse),
                Some(_) => {}
                None => {
                    log.insert(*nonce, digest);
                }
            }
        }
        let mut buf = plaintext.to_vec();
        let tag = ccm_seal(&self.sender_key, nonce, aad, &mut buf);
        self.ops.seals += 1;
        Ok((buf, tag))
    }

    /// Opens a payload sealed by the peer. When the scheme carries a
    /// sequence number and the window is enabled, replays are rejected
    /// before decryption.
    pub fn open(&mut self, aad: &[u8], sealed: &SealedPayload, scheme: NonceScheme<'_>) -> Result<Vec<u8>, SecError> {
        let explicit = &sealed.explicit_nonce_part;
        let (nonce, seq) = match scheme {
            NonceScheme::TwoByteExplicit => {
                if explicit.len() != 2 {
                    return Err(SecError::BadExplicitNonce(explicit.len()));
                }
                let seq = u16::from_be_bytes([explicit[0], explicit[1]]) as u64;
                (self.explicit_nonce(explicit, NONCE_LEN - 2), Some(seq))
            }
            NonceScheme::EpochSeq8 { epoch } => {
                if explicit.len() != 8 || explicit[..2] != epoch.to_be_bytes() {
                    return Err(SecError::BadExplicitNonce(explicit.len()));
                }
                let seq = explicit[2..].iter().fold(0u64, |a, b| (a << 8) | *b as u64);
                (self.explicit_nonce(explicit, NONCE_LEN - 8), Some(seq))
            }
            NonceScheme::PartialIv => {
                if explicit.is_empty() || explicit.len() > MAX_PIV_LEN {
                    return Err(SecError::BadExplicitNonce(explicit.len()));
                }
                let seq = explicit.iter().fold(0u64, |a, b| (a << 8) | *b as u64);
                let id = self.params.recipient_id.clone();
                (self.partial_iv_nonce(&id, explicit), Some(seq))
            }
            NonceScheme::NameHash(name) => {
                if !explicit.is_empty() {
                    return Err(SecError::BadExplicitNonce(explicit.len()));
                }
                (name_nonce(name), None)
            }
        };
        if let (Some(seq), Some(window)) = (seq, self.replay.as_ref()) {
            if !window.check(seq) {
                return Err(SecError::Replay(seq));
            }
        }
        let plaintext = self.open_with_nonce(&nonce, aad, sealed)?;
        if let (Some(seq), Some(window)) = (seq, self.replay.as_mut()) {
            window.accept(seq);
        }
        Ok(plaintext)
    }

    /// Opens with a caller-supplied nonce under the recipient key. No replay
    /// processing.
    pub fn open_with_nonce(&mut self, nonce: &Nonce, aad: &[u8], sealed: &SealedPayload) -> Result<Vec<u8>, SecError> {
        self.ops.opens += 1;
        let mut buf = sealed.ciphertext.clone();
        if ccm_open(&self.recipient_key, nonce, aad, &mut buf, &sealed.tag) {
            Ok(buf)
        } else {
            Err(SecError::AuthenticationFailed)
        }
    }

    /// HMAC under this endpoint's signing key.
    pub fn sign(&mut self, bytes: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.ops.hmac_signs += 1;
        hmac_sign(&self.sender_auth_key, bytes)
    }

    /// Verifies an HMAC produced by the peer.
    pub fn verify(&mut self, bytes: &[u8], signature: &[u8]) -> bool {
        self.ops.hmac_verifies += 1;
        hmac_verify(&self.recipient_auth_key, bytes, signature)
    }
}

/// Minimal big-endian encoding; zero encodes as a single zero byte.
pub fn encode_partial_iv(seq: u64) -> Vec<u8> {
    let bytes = seq.to_be_bytes();
    let first = bytes.iter().position(|b| *b != 0).unwrap_or(7);
    bytes[first..].to_vec()
}

pub fn name_nonce(encoded_name: &[u8]) -> Nonce {
    let digest = sha256(encoded_name);
    let mut nonce = [0; NONCE_LEN];
    nonce.copy_from_slice(&digest[..NONCE_LEN]);
    nonce
}

/// Bounded set of contexts keyed by peer; the gateway holds at most ten and
/// each sensor one.
#[derive(Debug)]
pub struct ContextTable<K: Ord> {
    limit: usize,
    contexts: BTreeMap<K, SecurityContext>,
}

pub const GATEWAY_CONTEXT_LIMIT: usize = 10;
pub const SENSOR_CONTEXT_LIMIT: usize = 1;

impl<K: Ord> ContextTable<K> {
    pub fn new(limit: usize) -> Self {
        ContextTable {
            limit,
            contexts: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, peer: K, ctx: SecurityContext) -> Result<(), SecError> {
        if !self.contexts.contains_key(&peer) && self.contexts.len() >= self.limit {
            return Err(SecError::ContextLimit(self.limit));
        }
        self.contexts.insert(peer, ctx);
        Ok(())
    }

    pub fn get(&self, peer: &K) -> Option<&SecurityContext> {
        self.contexts.get(peer)
    }

    pub fn get_mut(&mut self, peer: &K) -> Option<&mut SecurityContext> {
        self.contexts.get_mut(peer)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &SecurityContext)> {
        self.contexts.iter()
    }
}

/// A matched client/server context pair over the same pre-shared key.
pub fn context_pair(
    psk: Key,
    client_id: &[u8],
    server_id: &[u8],
    salt: &[u8],
    resource_uri: &[u8],
) -> Result<(SecurityContext, SecurityContext), SecError> {
    let client = SecurityContext::new(ContextParams {
        psk,
        salt: salt.to_vec(),
        resource_uri: resource_uri.to_vec(),
        sender_id: client_id.to_vec(),
        recipient_id: server_id.to_vec(),
        role: Role::Client,
    })?;
    let server = SecurityContext::new(ContextParams {
        psk,
        salt: salt.to_vec(),
        resource_uri: resource_uri.to_vec(),
        sender_id: server_id.to_vec(),
        recipient_id: client_id.to_vec(),
        role: Role::Server,
    })?;
    Ok((client, server))
}
