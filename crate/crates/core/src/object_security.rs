//! OSCORE-style object security for CoAP.
//!
//! A request is split into an outer message and a sealed inner message. The
//! inner plaintext is `code ‖ options ‖ [0xFF ‖ payload]`; the outer message
//! keeps only type, message id and token, uses a fixed code (POST for
//! requests, 2.04 Changed for responses) and carries a single OSCORE option:
//!
//! ```text
//! request:  flags (0b0000_1nnn) ‖ partial IV (n bytes) ‖ key id
//! response: empty
//! ```
//!
//! Responses are sealed with the nonce of the request they answer, under the
//! responder's own key, so they need neither partial IV nor key id.

use std::collections::BTreeMap;

use crate::codec::coap::{decode_options, encode_options, option, PAYLOAD_MARKER};
use crate::codec::{encode_coap, CoapMessage, CoapOption, Code, CodecError, MessageKind};
use crate::secctx::{encode_partial_iv, NonceScheme, SealedPayload, SecError, SecurityContext};

pub const OUTER_REQUEST_CODE: Code = Code::POST;
pub const OUTER_RESPONSE_CODE: Code = Code::CHANGED;
const FLAG_KID: u8 = 0x08;
const FLAG_PIV_MASK: u8 = 0x07;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OscoreError {
    #[error(transparent)]
    Sec(#[from] SecError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("message carries no OSCORE option")]
    MissingOption,
    #[error("malformed OSCORE option")]
    MalformedOption,
    #[error("expected a request")]
    NotARequest,
    #[error("expected a response")]
    NotAResponse,
    #[error("response does not match an outstanding request")]
    UnboundResponse,
    #[error("unknown key id {0:02x?}")]
    UnknownKeyId(Vec<u8>),
    #[error("message was not protected by this endpoint")]
    NotLocallyProtected,
    #[error("inner message is malformed")]
    MalformedInner,
}

/// Identifiers that tie a response to its request.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RequestBinding {
    pub key_id: Vec<u8>,
    pub partial_iv: Vec<u8>,
}

/// An outer message plus, for locally protected messages, its cached wire
/// image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectedCoap {
    pub outer: CoapMessage,
    wire: Option<Vec<u8>>,
    binding: Option<RequestBinding>,
}

impl ProtectedCoap {
    /// Wraps a received outer message.
    pub fn received(outer: CoapMessage) -> Self {
        ProtectedCoap {
            outer,
            wire: None,
            binding: None,
        }
    }

    pub fn binding(&self) -> Option<&RequestBinding> {
        self.binding.as_ref()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        match &self.wire {
            Some(w) => Ok(w.clone()),
            None => encode_coap(&self.outer),
        }
    }
}

/// The cached wire bytes of a message this endpoint protected. No
/// cryptographic work is done.
pub fn retransmit_bytes(protected: &ProtectedCoap) -> Result<Vec<u8>, OscoreError> {
    protected.wire.clone().ok_or(OscoreError::NotLocallyProtected)
}

fn inner_plaintext(msg: &CoapMessage) -> Result<Vec<u8>, CodecError> {
    let mut inner = vec![msg.code.0];
    encode_options(&msg.options, &mut inner)?;
    if !msg.payload.is_empty() {
        inner.push(PAYLOAD_MARKER);
        inner.extend_from_slice(&msg.payload);
    }
    Ok(inner)
}

fn parse_inner(bytes: &[u8]) -> Result<(Code, Vec<CoapOption>, Vec<u8>), OscoreError> {
    let (&code, rest) = bytes.split_first().ok_or(OscoreError::MalformedInner)?;
    let (options, used) = decode_options(rest)?;
    let payload = match rest[used..].split_first() {
        None => Vec::new(),
        Some((_, [])) => return Err(OscoreError::MalformedInner),
        Some((_, p)) => p.to_vec(),
    };
    Ok((Code(code), options, payload))
}

fn aad(outer_code: Code, binding: &RequestBinding) -> Vec<u8> {
    let mut a = vec![1, outer_code.0, binding.key_id.len() as u8];
    a.extend_from_slice(&binding.key_id);
    a.push(binding.partial_iv.len() as u8);
    a.extend_from_slice(&binding.partial_iv);
    a
}

fn outer(msg: &CoapMessage, code: Code, option_value: Vec<u8>, sealed: &SealedPayload) -> CoapMessage {
    let mut payload = sealed.ciphertext.clone();
    payload.extend_from_slice(&sealed.tag);
    CoapMessage {
        msg_type: msg.msg_type,
        code,
        message_id: msg.message_id,
        token: msg.token.clone(),
        options: vec![CoapOption::new(option::OSCORE, option_value)],
        payload,
    }
}

fn finish(outer: CoapMessage, binding: Option<RequestBinding>) -> Result<ProtectedCoap, OscoreError> {
    let wire = encode_coap(&outer)?;
    Ok(ProtectedCoap {
        outer,
        wire: Some(wire),
        binding,
    })
}

pub fn protect_request(ctx: &mut SecurityContext, msg: &CoapMessage) -> Result<ProtectedCoap, OscoreError> {
    if msg.kind() != MessageKind::Request {
        return Err(OscoreError::NotARequest);
    }
    let binding = RequestBinding {
        key_id: ctx.sender_id().to_vec(),
        partial_iv: encode_partial_iv(ctx.send_seq() as u64),
    };
    let sealed = ctx.seal(
        &aad(OUTER_REQUEST_CODE, &binding),
        &inner_plaintext(msg)?,
        NonceScheme::PartialIv,
    )?;
    debug_assert_eq!(sealed.explicit_nonce_part, binding.partial_iv);
    let mut value = vec![FLAG_KID | binding.partial_iv.len() as u8];
    value.extend_from_slice(&binding.partial_iv);
    value.extend_from_slice(&binding.key_id);
    finish(outer(msg, OUTER_REQUEST_CODE, value, &sealed), Some(binding))
}

fn oscore_option(msg: &CoapMessage) -> Result<&[u8], OscoreError> {
    msg.option(option::OSCORE)
        .map(|o| o.value.as_slice())
        .ok_or(OscoreError::MissingOption)
}

fn sealed_body(msg: &CoapMessage) -> Result<SealedPayload, OscoreError> {
    SealedPayload::from_bytes(&msg.payload, 0).ok_or(OscoreError::MalformedInner)
}

/// Server side: verifies and decrypts a request, enforcing the replay
/// window. Returns the restored message and the binding for the response.
pub fn unprotect_request(
    ctx: &mut SecurityContext,
    protected: &ProtectedCoap,
) -> Result<(CoapMessage, RequestBinding), OscoreError> {
    let msg = &protected.outer;
    if msg.kind() != MessageKind::Request {
        return Err(OscoreError::NotARequest);
    }
    let value = oscore_option(msg)?;
    let (&flags, rest) = value.split_first().ok_or(OscoreError::MalformedOption)?;
    let n = (flags & FLAG_PIV_MASK) as usize;
    if flags & !(FLAG_KID | FLAG_PIV_MASK) != 0 || flags & FLAG_KID == 0 || n == 0 || n > 5 || rest.len() <= n {
        return Err(OscoreError::MalformedOption);
    }
    let binding = RequestBinding {
        partial_iv: rest[..n].to_vec(),
        key_id: rest[n..].to_vec(),
    };
    if binding.key_id != ctx.recipient_id() {
        return Err(OscoreError::UnknownKeyId(binding.key_id));
    }
    let mut sealed = sealed_body(msg)?;
    sealed.explicit_nonce_part = binding.partial_iv.clone();
    let plain = ctx.open(&aad(msg.code, &binding), &sealed, NonceScheme::PartialIv)?;
    let (code, options, payload) = parse_inner(&plain)?;
    Ok((
        CoapMessage {
            msg_type: msg.msg_type,
            code,
            message_id: msg.message_id,
            token: msg.token.clone(),
            options,
            payload,
        },
        binding,
    ))
}

pub fn protect_response(
    ctx: &mut SecurityContext,
    binding: &RequestBinding,
    msg: &CoapMessage,
) -> Result<ProtectedCoap, OscoreError> {
    if msg.kind() != MessageKind::Response {
        return Err(OscoreError::NotAResponse);
    }
    let nonce = ctx.partial_iv_nonce(&binding.key_id, &binding.partial_iv);
    let sealed = ctx.seal_with_nonce(&nonce, &aad(OUTER_RESPONSE_CODE, binding), &inner_plaintext(msg)?)?;
    finish(outer(msg, OUTER_RESPONSE_CODE, Vec::new(), &sealed), None)
}

/// Verifies a response against a known binding.
pub fn unprotect_response(
    ctx: &mut SecurityContext,
    binding: &RequestBinding,
    protected: &ProtectedCoap,
) -> Result<CoapMessage, OscoreError> {
    let msg = &protected.outer;
    if msg.kind() != MessageKind::Response {
        return Err(OscoreError::NotAResponse);
    }
    if !oscore_option(msg)?.is_empty() {
        return Err(OscoreError::MalformedOption);
    }
    let nonce = ctx.partial_iv_nonce(&binding.key_id, &binding.partial_iv);
    let plain = ctx.open_with_nonce(&nonce, &aad(msg.code, binding), &sealed_body(msg)?)?;
    let (code, options, payload) = parse_inner(&plain)?;
    Ok(CoapMessage {
        msg_type: msg.msg_type,
        code,
        message_id: msg.message_id,
        token: msg.token.clone(),
        options,
        payload,
    })
}

/// Client-side map from request token to binding. An entry is consumed by
/// the first response that verifies against it.
#[derive(Debug, Default)]
pub struct BindingTable {
    pending: BTreeMap<Vec<u8>, RequestBinding>,
}

impl BindingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, token: &[u8], binding: RequestBinding) {
        self.pending.insert(token.to_vec(), binding);
    }

    pub fn get(&self, token: &[u8]) -> Option<&RequestBinding> {
        self.pending.get(token)
    }

    pub fn forget(&mut self, token: &[u8]) {
        self.pending.remove(token);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Verifies the response and completes the exchange.
    pub fn accept_response(
        &mut self,
        ctx: &mut SecurityContext,
        protected: &ProtectedCoap,
    ) -> Result<CoapMessage, OscoreError> {
        let token = &protected.outer.token;
        let binding = self.pending.get(token).ok_or(OscoreError::UnboundResponse)?;
        let msg = unprotect_response(ctx, binding, protected)?;
        self.pending.remove(token);
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secctx::context_pair;

    fn pair() -> (SecurityContext, SecurityContext) {
        context_pair([3; 16], &[0x00], &[0x05], b"salt", b"").unwrap()
    }

    fn wire_len(m: &CoapMessage) -> usize {
        encode_coap(m).unwrap().len()
    }

    #[test]
    fn request_and_response_deltas() {
        let (mut gw, mut sensor) = pair();
        gw.set_send_seq(3);
        let req = CoapMessage::get(10, &[0xAB, 0xCD], "/temp");
        let p = protect_request(&mut gw, &req).unwrap();
        assert_eq!(p.encode().unwrap().len() - wire_len(&req), 14);
        assert!(p.outer.option(option::URI_PATH).is_none());
        assert_eq!(p.outer.code, OUTER_REQUEST_CODE);

        let (restored, binding) = unprotect_request(&mut sensor, &ProtectedCoap::received(p.outer.clone())).unwrap();
        assert_eq!(restored, req);
        let resp = CoapMessage::content_response(&req, &[0x00, 0x15]);
        let pr = protect_response(&mut sensor, &binding, &resp).unwrap();
        assert_eq!(pr.encode().unwrap().len() - wire_len(&resp), 11);

        let mut table = BindingTable::new();
        table.register(&req.token, p.binding().unwrap().clone());
        let got = table
            .accept_response(&mut gw, &ProtectedCoap::received(pr.outer.clone()))
            .unwrap();
        assert_eq!(got, resp);
        // a delayed duplicate no longer has a binding
        assert_eq!(
            table.accept_response(&mut gw, &ProtectedCoap::received(pr.outer)),
            Err(OscoreError::UnboundResponse)
        );
    }

    #[test]
    fn wide_partial_iv_costs_one_more_byte() {
        let (mut gw, _) = pair();
        gw.set_send_seq(300);
        let req = CoapMessage::get(10, &[1, 2], "/temp");
        let p = protect_request(&mut gw, &req).unwrap();
        assert_eq!(p.encode().unwrap().len() - wire_len(&req), 15);
    }

    #[test]
    fn replayed_request_rejected() {
        let (mut gw, mut sensor) = pair();
        let p = protect_request(&mut gw, &CoapMessage::get(1, &[1], "/temp")).unwrap();
        let rx = ProtectedCoap::received(p.outer);
        unprotect_request(&mut sensor, &rx).unwrap();
        assert_eq!(
            unprotect_request(&mut sensor, &rx).unwrap_err(),
            OscoreError::Sec(SecError::Replay(0))
        );
    }

    #[test]
    fn response_bound_to_other_request_fails() {
        let (mut gw, mut sensor) = pair();
        let a = protect_request(&mut gw, &CoapMessage::get(1, &[1], "/temp")).unwrap();
        let b = protect_request(&mut gw, &CoapMessage::get(2, &[2], "/temp")).unwrap();
        let (req_a, bind_a) = unprotect_request(&mut sensor, &ProtectedCoap::received(a.outer.clone())).unwrap();
        let resp = protect_response(&mut sensor, &bind_a, &CoapMessage::content_response(&req_a, &[1])).unwrap();
        assert!(unprotect_response(&mut gw, a.binding().unwrap(), &resp).is_ok());
        assert_eq!(
            unprotect_response(&mut gw, b.binding().unwrap(), &resp),
            Err(OscoreError::Sec(SecError::AuthenticationFailed))
        );
    }

    #[test]
    fn retransmission_reuses_wire_image_without_sealing() {
        let (mut gw, _) = pair();
        let p = protect_request(&mut gw, &CoapMessage::get(1, &[1], "/temp")).unwrap();
        let before = gw.ops();
        assert_eq!(retransmit_bytes(&p).unwrap(), p.encode().unwrap());
        assert_eq!(gw.ops().since(before).seals, 0);
        assert_eq!(
            retransmit_bytes(&ProtectedCoap::received(p.outer)),
            Err(OscoreError::NotLocallyProtected)
        );
    }

    #[test]
    fn outer_rewrite_survives_inner_change_fails() {
        let (mut gw, mut sensor) = pair();
        let p = protect_request(&mut gw, &CoapMessage::get(1, &[1], "/temp")).unwrap();
        let mut proxied = p.outer.clone();
        proxied.message_id = 999;
        proxied.token = vec![0x77, 0x78];
        let mut s2 = sensor.clone();
        let (m, _) = unprotect_request(&mut s2, &ProtectedCoap::received(proxied.clone())).unwrap();
        assert_eq!(m.uri_path(), "/temp");
        proxied.payload[0] ^= 1;
        assert_eq!(
            unprotect_request(&mut sensor, &ProtectedCoap::received(proxied)),
            Err(OscoreError::Sec(SecError::AuthenticationFailed))
        );
    }
}
