//! Live-mode wire format: a 4-byte big-endian length followed by one flat
//! JSON object per message.

use cbt_core::{ChainId, EntryTransfer, Message, MessageKind, NodeId, TxnId};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::faults::parse_kind;

/// Frames above this size are refused on both ends.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    txn: Option<u64>,
    from_chain: u16,
    from_node: u16,
    to_chain: u16,
    to_node: u16,
    term: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    participants: Option<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entry: Option<EntryTransfer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accepted: Option<bool>,
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let w = WireMessage {
        kind: msg.kind.name().to_string(),
        txn: msg.txn.map(|t| t.0),
        from_chain: msg.from.chain.0,
        from_node: msg.from.node,
        to_chain: msg.to.chain.0,
        to_node: msg.to.node,
        term: msg.term,
        participants: msg.participants.as_ref().map(|ps| ps.iter().map(|c| c.0).collect()),
        entry: msg.entry.clone(),
        log_len: msg.log_len,
        accepted: msg.accepted,
    };
    serde_json::to_vec(&w).expect("message fields always serialize")
}

pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let w: WireMessage = serde_json::from_slice(bytes)?;
    let kind: MessageKind = parse_kind(&w.kind)
        .filter(|k| k.name() == w.kind)
        .ok_or_else(|| WireError::UnknownKind(w.kind.clone()))?;
    Ok(Message {
        kind,
        txn: w.txn.map(TxnId),
        from: NodeId::new(w.from_chain, w.from_node),
        to: NodeId::new(w.to_chain, w.to_node),
        term: w.term,
        participants: w.participants.map(|ps| ps.into_iter().map(ChainId).collect()),
        entry: w.entry,
        log_len: w.log_len,
        accepted: w.accepted,
    })
}

/// Length-prefixed frame for `msg`.
pub fn frame(msg: &Message) -> Vec<u8> {
    let body = encode(msg);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&frame(msg)).await?;
    w.flush().await?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    decode(&body).map(Some)
}
