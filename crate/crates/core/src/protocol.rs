//! Framed duplex protocol between client and server.
//!
//! A frame is a big-endian `u32` body length followed by the body: one
//! message-type byte and a payload. Control payloads are canonical JSON
//! (sorted keys, no whitespace, 64-bit hashes and nonces as 16 lowercase hex
//! digits); `BLOCK_RESP` is binary.

use std::io::{self, Read, Write};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::engines::HashVariant;
use crate::wire::{PutLe, Reader};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;
pub const PROTO_VERSION: u32 = 1;

pub mod msg_type {
    pub const HELLO: u8 = 0x01;
    pub const HELLO_OK: u8 = 0x02;
    pub const BLOCK_REQ: u8 = 0x10;
    pub const BLOCK_RESP: u8 = 0x11;
    pub const BLOCK_ERR: u8 = 0x12;
    pub const FLUSH: u8 = 0x20;
    pub const FLUSH_ACK: u8 = 0x21;
    pub const RA_CHALLENGE: u8 = 0x30;
    pub const RA_RESPONSE: u8 = 0x31;
    pub const EVENT: u8 = 0x40;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockErrCode {
    UnknownBlock = 1,
    ServingStopped = 2,
    IncompatibleSession = 3,
}

impl BlockErrCode {
    fn from_u64(v: u64) -> Option<Self> {
        match v {
            1 => Some(BlockErrCode::UnknownBlock),
            2 => Some(BlockErrCode::ServingStopped),
            3 => Some(BlockErrCode::IncompatibleSession),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Hello {
        app_id: String,
        session_id: String,
        proto_version: u32,
    },
    HelloOk {
        group_id: u32,
        policy_epoch: u64,
    },
    BlockReq {
        session_id: String,
        block_id: u32,
    },
    BlockResp {
        version_id: u64,
        group_id: u32,
        payload: Vec<u8>,
    },
    BlockErr {
        code: BlockErrCode,
        message: String,
    },
    /// An empty block list means every block.
    Flush {
        flush_id: u64,
        blocks: Vec<u32>,
        deadline_ms: u32,
    },
    FlushAck {
        flush_id: u64,
        flushed: Vec<u32>,
        deferred: Vec<u32>,
    },
    RaChallenge {
        challenge_id: u64,
        block_id: u32,
        nonce: u64,
        walk_seed: u64,
        sample_count: u32,
        variant: HashVariant,
    },
    RaResponse {
        challenge_id: u64,
        hash: u64,
    },
    Event {
        kind: String,
        details: Value,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("unknown message type {0:#04x}")]
    BadType(u8),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("truncated frame")]
    Truncated,
    #[error("empty frame body")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn hex64(v: u64) -> String {
    format!("{v:016x}")
}

pub fn is_session_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn u32_list(v: &[u32]) -> Value {
    Value::Array(v.iter().map(|x| json!(x)).collect())
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello { .. } => HELLO,
            Message::HelloOk { .. } => HELLO_OK,
            Message::BlockReq { .. } => BLOCK_REQ,
            Message::BlockResp { .. } => BLOCK_RESP,
            Message::BlockErr { .. } => BLOCK_ERR,
            Message::Flush { .. } => FLUSH,
            Message::FlushAck { .. } => FLUSH_ACK,
            Message::RaChallenge { .. } => RA_CHALLENGE,
            Message::RaResponse { .. } => RA_RESPONSE,
            Message::Event { .. } => EVENT,
        }
    }

    pub fn event(kind: &str, details: Value) -> Message {
        Message::Event { kind: kind.to_string(), details }
    }

    fn json(&self) -> Value {
        match self {
            Message::Hello { app_id, session_id, proto_version } => {
                json!({"app_id": app_id, "proto_version": proto_version, "session_id": session_id})
            }
            Message::HelloOk { group_id, policy_epoch } => json!({"group_id": group_id, "policy_epoch": policy_epoch}),
            Message::BlockReq { session_id, block_id } => json!({"block_id": block_id, "session_id": session_id}),
            Message::BlockErr { code, message } => json!({"code": *code as u8, "message": message}),
            Message::Flush { flush_id, blocks, deadline_ms } => {
                json!({"blocks": u32_list(blocks), "deadline_ms": deadline_ms, "flush_id": flush_id})
            }
            Message::FlushAck { flush_id, flushed, deferred } => {
                json!({"deferred": u32_list(deferred), "flush_id": flush_id, "flushed": u32_list(flushed)})
            }
            Message::RaChallenge { challenge_id, block_id, nonce, walk_seed, sample_count, variant } => json!({
                "block_id": block_id,
                "challenge_id": challenge_id,
                "nonce": hex64(*nonce),
                "sample_count": sample_count,
                "variant": variant.as_str(),
                "walk_seed": hex64(*walk_seed),
            }),
            Message::RaResponse { challenge_id, hash } => json!({"challenge_id": challenge_id, "hash": hex64(*hash)}),
            Message::Event { kind, details } => json!({"details": details, "kind": kind}),
            Message::BlockResp { .. } => unreachable!("binary message"),
        }
    }

    /// Message body: type byte followed by the payload.
    pub fn encode_body(&self) -> Vec<u8> {
        let mut out = vec![self.msg_type()];
        match self {
            Message::BlockResp { version_id, group_id, payload } => {
                out.put_u64(*version_id);
                out.put_u32(*group_id);
                out.put_u32(payload.len() as u32);
                out.extend_from_slice(payload);
            }
            _ => out.extend(canonical_json(&self.json()).into_bytes()),
        }
        out
    }

    pub fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
        let (&t, rest) = body.split_first().ok_or(ProtocolError::Empty)?;
        if t == msg_type::BLOCK_RESP {
            let mut r = Reader::new(rest);
            let trunc = |_| ProtocolError::Truncated;
            let version_id = r.u64().map_err(trunc)?;
            let group_id = r.u32().map_err(trunc)?;
            let len = r.u32().map_err(trunc)? as usize;
            let payload = r.bytes(len).map_err(trunc)?.to_vec();
            if r.remaining() != 0 {
                return Err(ProtocolError::Malformed("trailing bytes after BLOCK_RESP payload".into()));
            }
            return Ok(Message::BlockResp { version_id, group_id, payload });
        }
        let v: Value = serde_json::from_slice(rest).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| ProtocolError::Malformed("payload is not an object".into()))?;
        let f = Fields(obj);
        use msg_type::*;
        let msg = match t {
            HELLO => {
                f.exact(&["app_id", "proto_version", "session_id"])?;
                let session_id = f.string("session_id")?;
                if !is_session_id(&session_id) {
                    return Err(ProtocolError::Malformed("session_id must be 32 lowercase hex digits".into()));
                }
                Message::Hello { app_id: f.string("app_id")?, session_id, proto_version: f.u32("proto_version")? }
            }
            HELLO_OK => {
                f.exact(&["group_id", "policy_epoch"])?;
                Message::HelloOk { group_id: f.u32("group_id")?, policy_epoch: f.u64("policy_epoch")? }
            }
            BLOCK_REQ => {
                f.exact(&["block_id", "session_id"])?;
                let session_id = f.string("session_id")?;
                if !is_session_id(&session_id) {
                    return Err(ProtocolError::Malformed("session_id must be 32 lowercase hex digits".into()));
                }
                Message::BlockReq { session_id, block_id: f.u32("block_id")? }
            }
            BLOCK_ERR => {
                f.exact(&["code", "message"])?;
                let code = BlockErrCode::from_u64(f.u64("code")?)
                    .ok_or_else(|| ProtocolError::Malformed("unknown BLOCK_ERR code".into()))?;
                Message::BlockErr { code, message: f.string("message")? }
            }
            FLUSH => {
                f.exact(&["blocks", "deadline_ms", "flush_id"])?;
                Message::Flush {
                    flush_id: f.u64("flush_id")?,
                    blocks: f.list("blocks")?,
                    deadline_ms: f.u32("deadline_ms")?,
                }
            }
            FLUSH_ACK => {
                f.exact(&["deferred", "flush_id", "flushed"])?;
                Message::FlushAck {
                    flush_id: f.u64("flush_id")?,
                    flushed: f.list("flushed")?,
                    deferred: f.list("deferred")?,
                }
            }
            RA_CHALLENGE => {
                f.exact(&["block_id", "challenge_id", "nonce", "sample_count", "variant", "walk_seed"])?;
                Message::RaChallenge {
                    challenge_id: f.u64("challenge_id")?,
                    block_id: f.u32("block_id")?,
                    nonce: f.hex("nonce")?,
                    walk_seed: f.hex("walk_seed")?,
                    sample_count: f.u32("sample_count")?,
                    variant: f.string("variant")?.parse().map_err(ProtocolError::Malformed)?,
                }
            }
            RA_RESPONSE => {
                f.exact(&["challenge_id", "hash"])?;
                Message::RaResponse { challenge_id: f.u64("challenge_id")?, hash: f.hex("hash")? }
            }
            EVENT => {
                f.exact(&["details", "kind"])?;
                let details = obj["details"].clone();
                if !details.is_object() {
                    return Err(ProtocolError::Malformed("details must be an object".into()));
                }
                Message::Event { kind: f.string("kind")?, details }
            }
            other => return Err(ProtocolError::BadType(other)),
        };
        Ok(msg)
    }
}

struct Fields<'a>(&'a Map<String, Value>);

impl Fields<'_> {
    fn exact(&self, keys: &[&str]) -> Result<(), ProtocolError> {
        if self.0.len() != keys.len() || keys.iter().any(|k| !self.0.contains_key(*k)) {
            return Err(ProtocolError::Malformed(format!("expected exactly the fields {keys:?}")));
        }
        Ok(())
    }

    fn missing(k: &str) -> ProtocolError {
        ProtocolError::Malformed(format!("field '{k}' is missing or has the wrong type"))
    }

    fn string(&self, k: &str) -> Result<String, ProtocolError> {
        self.0.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| Self::missing(k))
    }

    fn u64(&self, k: &str) -> Result<u64, ProtocolError> {
        self.0.get(k).and_then(Value::as_u64).ok_or_else(|| Self::missing(k))
    }

    fn u32(&self, k: &str) -> Result<u32, ProtocolError> {
        self.u64(k)?.try_into().map_err(|_| Self::missing(k))
    }

    fn hex(&self, k: &str) -> Result<u64, ProtocolError> {
        let s = self.string(k)?;
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(ProtocolError::Malformed(format!("field '{k}' must be 16 lowercase hex digits")));
        }
        u64::from_str_radix(&s, 16).map_err(|_| Self::missing(k))
    }

    fn list(&self, k: &str) -> Result<Vec<u32>, ProtocolError> {
        let arr = self.0.get(k).and_then(Value::as_array).ok_or_else(|| Self::missing(k))?;
        arr.iter().map(|v| v.as_u64().and_then(|x| u32::try_from(x).ok()).ok_or_else(|| Self::missing(k))).collect()
    }
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key, so compact output is canonical.
    serde_json::to_string(v).expect("JSON values always serialize")
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let body = msg.encode_body();
    if body.len() > MAX_FRAME {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend((body.len() as u32).to_be_bytes());
    out.extend(body);
    Ok(out)
}

/// Decode one frame from the front of `buf`. Returns `Ok(None)` when more
/// bytes are needed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::Oversize(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((Message::decode_body(&buf[4..4 + len])?, 4 + len)))
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Message::decode_body(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_ok_canonical_bytes() {
        let frame = encode_frame(&Message::HelloOk { group_id: 0, policy_epoch: 1 }).unwrap();
        let body = br#"{"group_id":0,"policy_epoch":1}"#;
        assert_eq!(&frame[..4], &((body.len() + 1) as u32).to_be_bytes());
        assert_eq!(frame[4], 0x02);
        assert_eq!(&frame[5..], body);
    }

    #[test]
    fn oversize_frames_are_rejected() {
        let mut buf = ((17 * 1024 * 1024) as u32).to_be_bytes().to_vec();
        buf.push(0x02);
        assert!(matches!(decode_frame(&buf), Err(ProtocolError::Oversize(_))));
        let big = Message::BlockResp { version_id: 1, group_id: 0, payload: vec![0; 17 * 1024 * 1024] };
        assert!(matches!(encode_frame(&big), Err(ProtocolError::Oversize(_))));
    }

    #[test]
    fn challenge_uses_hex_fields() {
        let m = Message::RaChallenge {
            challenge_id: 3,
            block_id: 9,
            nonce: 0xAB,
            walk_seed: u64::MAX,
            sample_count: 16,
            variant: HashVariant::FnvWalk,
        };
        let body = m.encode_body();
        let text = std::str::from_utf8(&body[1..]).unwrap();
        assert!(text.contains(r#""nonce":"00000000000000ab""#));
        assert!(text.contains(r#""walk_seed":"ffffffffffffffff""#));
        assert_eq!(Message::decode_body(&body).unwrap(), m);
    }

    #[test]
    fn partial_frames_wait_for_more_bytes() {
        let frame = encode_frame(&Message::RaResponse { challenge_id: 1, hash: 2 }).unwrap();
        assert!(decode_frame(&frame[..frame.len() - 1]).unwrap().is_none());
        let (m, n) = decode_frame(&frame).unwrap().unwrap();
        assert_eq!(n, frame.len());
        assert_eq!(m, Message::RaResponse { challenge_id: 1, hash: 2 });
    }

    #[test]
    fn unknown_type_and_extra_fields_are_errors() {
        assert!(matches!(Message::decode_body(&[0x55, b'{', b'}']), Err(ProtocolError::BadType(0x55))));
        let mut body = vec![msg_type::HELLO_OK];
        body.extend(br#"{"extra":1,"group_id":0,"policy_epoch":1}"#);
        assert!(Message::decode_body(&body).is_err());
    }
}
