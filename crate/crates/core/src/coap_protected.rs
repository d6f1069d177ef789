//! Payload-only protection of CoAP responses.
//!
//! The response payload is replaced by `key id (2) ‖ sequence (2) ‖
//! ciphertext ‖ tag (8)`. Header, token and options stay in the clear and
//! are not authenticated, and the receiver keeps no replay state, so a
//! recorded response can be replayed against a later request.

use crate::codec::{CoapMessage, CodecError};
use crate::secctx::{NonceScheme, SealedPayload, SecError, SecurityContext};

pub const KEY_ID_LEN: usize = 2;
pub const EXPLICIT_NONCE_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error(transparent)]
    Sec(#[from] SecError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("protected payload too short ({0} bytes)")]
    Truncated(usize),
    #[error("unknown key id {0:02x?}")]
    UnknownKeyId(Vec<u8>),
    #[error("context key id must be {KEY_ID_LEN} bytes")]
    KeyIdWidth,
}

/// Seals `payload` under the sender key of `ctx`.
pub fn protect_payload(ctx: &mut SecurityContext, payload: &[u8]) -> Result<Vec<u8>, PayloadError> {
    if ctx.sender_id().len() != KEY_ID_LEN {
        return Err(PayloadError::KeyIdWidth);
    }
    let kid = ctx.sender_id().to_vec();
    let sealed = ctx.seal(&kid, payload, NonceScheme::TwoByteExplicit)?;
    let mut out = kid;
    out.extend_from_slice(&sealed.to_bytes());
    Ok(out)
}

pub fn unprotect_payload(ctx: &mut SecurityContext, bytes: &[u8]) -> Result<Vec<u8>, PayloadError> {
    if bytes.len() < KEY_ID_LEN + EXPLICIT_NONCE_LEN + crate::secctx::TAG_LEN {
        return Err(PayloadError::Truncated(bytes.len()));
    }
    let (kid, rest) = bytes.split_at(KEY_ID_LEN);
    if kid != ctx.recipient_id() {
        return Err(PayloadError::UnknownKeyId(kid.to_vec()));
    }
    let sealed = SealedPayload::from_bytes(rest, EXPLICIT_NONCE_LEN).ok_or(PayloadError::Truncated(bytes.len()))?;
    Ok(ctx.open(kid, &sealed, NonceScheme::TwoByteExplicit)?)
}

/// Response with its payload sealed; everything else is copied verbatim.
pub fn protect_response(ctx: &mut SecurityContext, msg: &CoapMessage) -> Result<CoapMessage, PayloadError> {
    let mut out = msg.clone();
    out.payload = protect_payload(ctx, &msg.payload)?;
    Ok(out)
}

pub fn unprotect_response(ctx: &mut SecurityContext, msg: &CoapMessage) -> Result<CoapMessage, PayloadError> {
    let mut out = msg.clone();
    out.payload = unprotect_payload(ctx, &msg.payload)?;
    Ok(out)
}
