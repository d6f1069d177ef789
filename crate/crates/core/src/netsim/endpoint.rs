//! Request creation, retransmission and response handling for the
//! CoAP-based stacks. The simulator and the creation-cost report both go
//! through these functions.

use crate::channel_security::{ChannelError, Session};
use crate::coap_protected::{self, PayloadError};
use crate::codec::{decode_coap, encode_coap, CoapMessage, Code, CodecError};
use crate::object_security::{self, BindingTable, OscoreError, ProtectedCoap};
use crate::secctx::SecurityContext;

pub const RESOURCE: &str = "/temp";
const NOT_FOUND: Code = Code::new(4, 4);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Oscore(#[from] OscoreError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// What a client keeps for retransmitting one request.
#[derive(Clone, Debug)]
pub enum RequestBuffer {
    /// Final wire bytes; retransmission resends them unchanged.
    Wire(Vec<u8>),
    /// OSCORE keeps the protected message, so a retransmission is a copy.
    Object(ProtectedCoap),
    /// Plain CoAP bytes; each transmission passes through the record layer.
    Channel(Vec<u8>),
}

/// Client-side security state for one peer.
pub enum ClientSecurity<'a> {
    Plain,
    /// Requests go out in the clear; responses carry a sealed payload.
    Payload(&'a mut SecurityContext),
    Oscore {
        ctx: &'a mut SecurityContext,
        bindings: &'a mut BindingTable,
    },
    Channel(&'a mut Session),
}

/// Builds the first transmission of `req`. The returned bytes are `None`
/// when a channel session must be established first.
pub fn create_request(
    sec: ClientSecurity<'_>,
    req: &CoapMessage,
) -> Result<(RequestBuffer, Option<Vec<u8>>), EndpointError> {
    match sec {
        ClientSecurity::Plain | ClientSecurity::Payload(_) => {
            let wire = encode_coap(req)?;
            Ok((RequestBuffer::Wire(wire.clone()), Some(wire)))
        }
        ClientSecurity::Oscore { ctx, bindings } => {
            let protected = object_security::protect_request(ctx, req)?;
            let binding = protected
                .binding()
                .cloned()
                .expect("locally protected request is bound");
            bindings.register(&req.token, binding);
            let wire = protected.encode()?;
            Ok((RequestBuffer::Object(protected), Some(wire)))
        }
        ClientSecurity::Channel(session) => {
            let plain = encode_coap(req)?;
            let wire = if session.is_established() {
                Some(session.protect_record(&plain)?.encode())
            } else {
                None
            };
            Ok((RequestBuffer::Channel(plain), wire))
        }
    }
}

/// Bytes for a retransmission of a buffered request; `None` when the
/// channel is not established.
pub fn retransmit_request(
    buf: &RequestBuffer,
    session: Option<&mut Session>,
) -> Result<Option<Vec<u8>>, EndpointError> {
    Ok(match buf {
        RequestBuffer::Wire(w) => Some(w.clone()),
        RequestBuffer::Object(p) => Some(object_security::retransmit_bytes(p)?),
        RequestBuffer::Channel(plain) => match session {
            Some(s) if s.is_established() => Some(s.protect_record(plain)?.encode()),
            _ => None,
        },
    })
}

/// Verifies and decodes a response. For channel security `bytes` are the
/// already decrypted record contents.
pub fn accept_response(sec: ClientSecurity<'_>, bytes: &[u8]) -> Result<CoapMessage, EndpointError> {
    let msg = decode_coap(bytes)?;
    Ok(match sec {
        ClientSecurity::Plain | ClientSecurity::Channel(_) => msg,
        ClientSecurity::Payload(ctx) => coap_protected::unprotect_response(ctx, &msg)?,
        ClientSecurity::Oscore { ctx, bindings } => bindings.accept_response(ctx, &ProtectedCoap::received(msg))?,
    })
}

/// Server-side security state.
pub enum ServerSecurity<'a> {
    Plain,
    Payload(&'a mut SecurityContext),
    Oscore(&'a mut SecurityContext),
}

/// Answers a decoded request with `reading`, returning response wire
/// bytes. Only GET on the temperature resource is served.
pub fn serve_request(sec: ServerSecurity<'_>, req: &CoapMessage, reading: &[u8]) -> Result<Vec<u8>, EndpointError> {
    let answer = |inner: &CoapMessage| {
        if inner.code == Code::GET && inner.uri_path() == RESOURCE {
            CoapMessage::content_response(inner, reading)
        } else {
            let mut r = CoapMessage::content_response(inner, &[]);
            r.code = NOT_FOUND;
            r
        }
    };
    match sec {
        ServerSecurity::Plain => Ok(encode_coap(&answer(req))?),
        ServerSecurity::Payload(ctx) => {
            let resp = coap_protected::protect_response(ctx, &answer(req))?;
            Ok(encode_coap(&resp)?)
        }
        ServerSecurity::Oscore(ctx) => {
            let (inner, binding) = object_security::unprotect_request(ctx, &ProtectedCoap::received(req.clone()))?;
            let resp = object_security::protect_response(ctx, &binding, &answer(&inner))?;
            Ok(resp.encode()?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_security::{handshake_in_memory, ChannelConfig};
    use crate::secctx::{context_pair, Role};

    #[test]
    fn oscore_round_trip_and_cheap_retransmission() {
        let (mut gw, mut sensor) = context_pair([1; 16], &[0], &[1], b"", b"").unwrap();
        let mut bindings = BindingTable::new();
        let req = CoapMessage::get(1, &[0, 1], RESOURCE);
        let (buf, wire) = create_request(
            ClientSecurity::Oscore {
                ctx: &mut gw,
                bindings: &mut bindings,
            },
            &req,
        )
        .unwrap();
        let wire = wire.unwrap();
        let before = gw.ops();
        assert_eq!(retransmit_request(&buf, None).unwrap().unwrap(), wire);
        assert_eq!(gw.ops(), before);

        let resp = serve_request(
            ServerSecurity::Oscore(&mut sensor),
            &decode_coap(&wire).unwrap(),
            &[0, 21],
        )
        .unwrap();
        let got = accept_response(
            ClientSecurity::Oscore {
                ctx: &mut gw,
                bindings: &mut bindings,
            },
            &resp,
        )
        .unwrap();
        assert_eq!(got.payload, vec![0, 21]);
        assert_eq!(got.code, Code::CONTENT);
    }

    #[test]
    fn channel_request_waits_for_session() {
        let cfg = ChannelConfig::default();
        let mut c = Session::new(Role::Client, [2; 16], cfg, 1).unwrap();
        let mut s = Session::new(Role::Server, [2; 16], cfg, 2).unwrap();
        let req = CoapMessage::get(1, &[0, 1], RESOURCE);
        let (buf, wire) = create_request(ClientSecurity::Channel(&mut c), &req).unwrap();
        assert!(wire.is_none());
        assert!(retransmit_request(&buf, Some(&mut c)).unwrap().is_none());
        handshake_in_memory(&mut c, &mut s).unwrap();
        let seals = c.ops().seals;
        assert!(retransmit_request(&buf, Some(&mut c)).unwrap().is_some());
        assert_eq!(c.ops().seals, seals + 1);
    }

    #[test]
    fn unknown_resource_gets_not_found() {
        let req = CoapMessage::get(1, &[7], "/humidity");
        let resp = decode_coap(&serve_request(ServerSecurity::Plain, &req, &[1, 2]).unwrap()).unwrap();
        assert_eq!(resp.code, NOT_FOUND);
        assert!(resp.payload.is_empty());
    }
}
